//! K-means codebooks for discretizing feature streams into units
//! (2000 lip units / 100 speech units in the full-scale configuration).

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::featureio::{
    l2_distance_sq, read_matrix_container, write_matrix_container, FeatureKind, FeatureSequence,
    UnitSequence,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitMetadata {
    pub iterations_run: usize,
    pub inertia: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub centroids: Array2<f32>,
    pub kind: FeatureKind,
    pub fit_metadata: FitMetadata,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }
}

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITERS: usize = 100;

fn nearest_centroid(frame: ArrayView1<f32>, centroids: ArrayView2<f32>) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = l2_distance_sq(frame, c) as f64;
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ initialization. Terminates when the
/// maximum centroid L2 movement drops below `tol` or after `max_iters`.
pub fn fit_kmeans(
    features: &Array2<f32>,
    k: usize,
    kind: FeatureKind,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<Codebook> {
    let n = features.nrows();
    let d = features.ncols();
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Capacity(format!(
            "need at least {k} input vectors, got {n}"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in k-means input".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(features, k, &mut rng)?;

    let mut assignment = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    let mut iterations_run = 0;

    for iter in 0..max_iters {
        iterations_run = iter + 1;

        // Assignment step.
        let mut new_inertia = 0.0;
        for (i, frame) in features.rows().into_iter().enumerate() {
            let (best, best_d) = nearest_centroid(frame, centroids.view());
            assignment[i] = best;
            new_inertia += best_d;
        }
        inertia = new_inertia;

        // Update step with f64 accumulators for bit-stable sums.
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, frame) in features.rows().into_iter().enumerate() {
            let a = assignment[i];
            counts[a] += 1;
            for (j, &v) in frame.iter().enumerate() {
                sums[a][j] += v as f64;
            }
        }

        // Empty clusters are re-seeded with the point farthest from its
        // current centroid.
        let mut max_move_sq = 0.0f64;
        let mut claimed = vec![false; n];
        for c in 0..k {
            let new_row: Vec<f32> = if counts[c] > 0 {
                sums[c].iter().map(|&s| (s / counts[c] as f64) as f32).collect()
            } else {
                let mut far_i = 0usize;
                let mut far_d = -1.0f64;
                for (i, frame) in features.rows().into_iter().enumerate() {
                    if claimed[i] {
                        continue;
                    }
                    let dsq = l2_distance_sq(frame, centroids.row(assignment[i])) as f64;
                    if dsq > far_d {
                        far_d = dsq;
                        far_i = i;
                    }
                }
                claimed[far_i] = true;
                features.row(far_i).to_vec()
            };
            let move_sq: f64 = centroids
                .row(c)
                .iter()
                .zip(&new_row)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            max_move_sq = max_move_sq.max(move_sq);
            for (j, &v) in new_row.iter().enumerate() {
                centroids[[c, j]] = v;
            }
        }

        if max_move_sq.sqrt() < tol {
            break;
        }
    }

    // Final inertia against the converged centroids.
    let mut final_inertia = 0.0;
    for frame in features.rows() {
        final_inertia += nearest_centroid(frame, centroids.view()).1;
    }
    inertia = inertia.min(final_inertia);

    Ok(Codebook {
        centroids,
        kind,
        fit_metadata: FitMetadata {
            iterations_run,
            inertia,
            seed,
        },
    })
}

fn kmeans_pp_init(
    features: &Array2<f32>,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Array2<f32>> {
    let n = features.nrows();
    let d = features.ncols();
    let mut centroids = Array2::<f32>::zeros((k, d));

    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));

    let mut dist_sq: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|f| l2_distance_sq(f, centroids.row(0)) as f64)
        .collect();

    for c in 1..k {
        let total: f64 = dist_sq.iter().sum();
        if total <= 0.0 {
            return Err(Error::Capacity(format!(
                "fewer than {k} distinct points in k-means input"
            )));
        }
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in dist_sq.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        centroids.row_mut(c).assign(&features.row(chosen));
        for (i, frame) in features.rows().into_iter().enumerate() {
            let nd = l2_distance_sq(frame, centroids.row(c)) as f64;
            if nd < dist_sq[i] {
                dist_sq[i] = nd;
            }
        }
    }
    Ok(centroids)
}

/// Nearest-centroid quantization; ties break toward the smallest index.
pub fn assign(codebook: &Codebook, seq: &FeatureSequence) -> Result<UnitSequence> {
    if seq.dim() != codebook.dim() {
        return Err(Error::Shape(format!(
            "feature dim {} does not match codebook dim {}",
            seq.dim(),
            codebook.dim()
        )));
    }
    let ids = seq
        .frames
        .rows()
        .into_iter()
        .map(|f| nearest_centroid(f, codebook.centroids.view()).0 as u32)
        .collect();
    UnitSequence::new(ids, codebook.k() as u32, seq.frame_rate_hz)
}

pub fn save_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    write_matrix_container(path, 2, 0, Some(cb.kind.code()), &cb.centroids)
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let (header, centroids) = read_matrix_container(path, 2)?;
    let kind = FeatureKind::from_code(header.kind_code.expect("version 2 carries kind"))?;
    Ok(Codebook {
        centroids,
        kind,
        fit_metadata: FitMetadata {
            iterations_run: 0,
            inertia: 0.0,
            seed: 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::RngCore;
    use tempfile::tempdir;

    fn seq(frames: Array2<f32>, rate: u32) -> FeatureSequence {
        FeatureSequence::new(frames, rate, FeatureKind::Speech).unwrap()
    }

    /// Exhaustive check over all 2-partitions of 4 1-D points: the optimal
    /// clustering of {0, 0.1, 10, 10.1} is {0, 0.1} | {10, 10.1}.
    #[test]
    fn separable_1d_fixture_recovers_optimal_partition() {
        let points = [0.0f64, 0.1, 10.0, 10.1];
        let mut best_inertia = f64::INFINITY;
        let mut best_mask = 0u32;
        for mask in 1..15u32 {
            let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0, 0.0, 0);
            for (i, &p) in points.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    s1 += p;
                    n1 += 1;
                } else {
                    s0 += p;
                    n0 += 1;
                }
            }
            let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
            let inertia: f64 = points
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let m = if mask & (1 << i) != 0 { m1 } else { m0 };
                    (p - m) * (p - m)
                })
                .sum();
            if inertia < best_inertia {
                best_inertia = inertia;
                best_mask = mask;
            }
        }
        assert!(best_mask == 0b1100 || best_mask == 0b0011);

        let data = array![[0.0f32], [0.1], [10.0], [10.1]];
        let cb = fit_kmeans(&data, 2, FeatureKind::Speech, 0, 100, 1e-6).unwrap();
        let mut centers: Vec<f32> = cb.centroids.column(0).to_vec();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((centers[0] - 0.05).abs() < 1e-6);
        assert!((centers[1] - 10.05).abs() < 1e-6);
        assert!((cb.fit_metadata.inertia - best_inertia).abs() < 1e-6);

        let units = assign(&cb, &seq(data, 50)).unwrap();
        assert_eq!(units.ids[0], units.ids[1]);
        assert_eq!(units.ids[2], units.ids[3]);
        assert_ne!(units.ids[0], units.ids[2]);
    }

    #[test]
    fn k_equals_distinct_points_gives_zero_inertia() {
        let data = array![[1.0f32, 0.0], [2.0, 0.0], [3.0, 5.0]];
        let cb = fit_kmeans(&data, 3, FeatureKind::Lip, 4, 100, 1e-6).unwrap();
        assert!(cb.fit_metadata.inertia < 1e-12);
        let units = assign(&cb, &seq(data, 25)).unwrap();
        let mut sorted = units.ids.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let data = Array2::from_shape_fn((60, 5), |_| (rng.next_u32() % 1000) as f32 / 100.0);
        let a = fit_kmeans(&data, 7, FeatureKind::Speech, 3, 50, 1e-4).unwrap();
        let b = fit_kmeans(&data, 7, FeatureKind::Speech, 3, 50, 1e-4).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.fit_metadata, b.fit_metadata);
    }

    #[test]
    fn too_few_vectors_is_capacity_error() {
        let data = array![[1.0f32], [2.0]];
        assert!(matches!(
            fit_kmeans(&data, 3, FeatureKind::Speech, 0, 10, 1e-4),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn nan_input_is_validation_error() {
        let data = array![[1.0f32], [f32::NAN], [2.0]];
        assert!(matches!(
            fit_kmeans(&data, 2, FeatureKind::Speech, 0, 10, 1e-4),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn assign_matches_brute_force_scan() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let centroids = Array2::from_shape_fn((16, 6), |_| {
            (rng.next_u32() % 2000) as f32 / 100.0 - 10.0
        });
        let cb = Codebook {
            centroids: centroids.clone(),
            kind: FeatureKind::Speech,
            fit_metadata: FitMetadata {
                iterations_run: 0,
                inertia: 0.0,
                seed: 0,
            },
        };
        let frames = Array2::from_shape_fn((10, 6), |_| {
            (rng.next_u32() % 2000) as f32 / 100.0 - 10.0
        });
        let units = assign(&cb, &seq(frames.clone(), 50)).unwrap();
        for (t, frame) in frames.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (k, c) in centroids.rows().into_iter().enumerate() {
                let d: f32 = frame
                    .iter()
                    .zip(c.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(units.ids[t], best as u32);
        }
    }

    #[test]
    fn assign_zero_distance_and_tie_break() {
        let centroids = array![[0.0f32, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let cb = Codebook {
            centroids,
            kind: FeatureKind::Speech,
            fit_metadata: FitMetadata {
                iterations_run: 0,
                inertia: 0.0,
                seed: 0,
            },
        };
        // Exactly centroid 1 -> id 1; equidistant from 0 and 1 -> id 0.
        let frames = array![[1.0f32, 0.0], [0.5, 0.0]];
        let units = assign(&cb, &seq(frames, 50)).unwrap();
        assert_eq!(units.ids, vec![1, 0]);
    }

    #[test]
    fn assign_dimension_mismatch() {
        let cb = Codebook {
            centroids: array![[0.0f32, 0.0]],
            kind: FeatureKind::Speech,
            fit_metadata: FitMetadata {
                iterations_run: 0,
                inertia: 0.0,
                seed: 0,
            },
        };
        let frames = array![[1.0f32, 2.0, 3.0]];
        assert!(matches!(
            assign(&cb, &seq(frames, 50)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn assign_centroids_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let centroids =
            Array2::from_shape_fn((12, 4), |_| (rng.next_u32() % 100) as f32 / 10.0);
        let cb = Codebook {
            centroids: centroids.clone(),
            kind: FeatureKind::Speech,
            fit_metadata: FitMetadata {
                iterations_run: 0,
                inertia: 0.0,
                seed: 0,
            },
        };
        let units = assign(&cb, &seq(centroids, 50)).unwrap();
        let expected: Vec<u32> = (0..12).collect();
        assert_eq!(units.ids, expected);
    }

    #[test]
    fn codebook_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cb.l2sf");
        let cb = Codebook {
            centroids: array![[1.5f32, -2.5], [0.0, 1e-6]],
            kind: FeatureKind::Lip,
            fit_metadata: FitMetadata {
                iterations_run: 3,
                inertia: 0.5,
                seed: 9,
            },
        };
        save_codebook(&cb, &path).unwrap();
        let back = load_codebook(&path).unwrap();
        assert_eq!(back.centroids, cb.centroids);
        assert_eq!(back.kind, FeatureKind::Lip);
    }

    #[test]
    fn truncated_codebook_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cb.l2sf");
        let cb = Codebook {
            centroids: Array2::from_elem((4, 4), 1.0f32),
            kind: FeatureKind::Speech,
            fit_metadata: FitMetadata {
                iterations_run: 0,
                inertia: 0.0,
                seed: 0,
            },
        };
        save_codebook(&cb, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_codebook(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn bad_kind_code_is_validation_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cb.l2sf");
        write_matrix_container(&path, 2, 0, Some(99), &array![[1.0f32]]).unwrap();
        assert!(matches!(load_codebook(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn inertia_not_above_init_inertia() {
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let data = Array2::from_shape_fn((80, 3), |_| {
            (rng.next_u32() % 1000) as f32 / 50.0
        });
        let mut init_rng = ChaCha20Rng::seed_from_u64(21);
        let init = kmeans_pp_init(&data, 6, &mut init_rng).unwrap();
        let init_inertia: f64 = data
            .rows()
            .into_iter()
            .map(|f| nearest_centroid(f, init.view()).1)
            .sum();
        let cb = fit_kmeans(&data, 6, FeatureKind::Speech, 21, 100, 1e-4).unwrap();
        assert!(cb.fit_metadata.inertia <= init_inertia + 1e-9);
    }
}
