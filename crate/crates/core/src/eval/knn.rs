//! PCA and cosine k-nearest-neighbour probing of frozen features.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autograd::Mat;
use crate::error::{ensure, Result};

/// Principal axes fitted on one feature matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dims × features`, rows ordered by decreasing variance.
    pub components: Mat,
}

impl Pca {
    /// Keeps `min(dims, features, samples)` components. Each component's
    /// largest-magnitude loading is made positive so the fit is unique.
    pub fn fit(x: &Mat, dims: usize) -> Result<Self> {
        let (n, d) = x.dim();
        ensure!(n > 0 && d > 0, "cannot fit PCA on an empty matrix");
        ensure!(dims > 0, "PCA needs at least one output dimension");
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let r = dims.min(d).min(n);
        let mut components = Mat::zeros((r, d));
        for (row, &k) in order.iter().take(r).enumerate() {
            let v = eig.eigenvectors.column(k);
            let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).expect("d > 0");
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                components[[row, j]] = sign * v[j];
            }
        }
        Ok(Pca { mean, components })
    }

    pub fn dims(&self) -> usize {
        self.components.nrows()
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        ensure!(
            x.ncols() == self.mean.len(),
            "PCA fitted on {} features, got {}",
            self.mean.len(),
            x.ncols()
        );
        let mut c = x.clone();
        for mut row in c.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        Ok(c.dot(&self.components.t()))
    }
}

fn cosine_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(&b) / (na * nb)
}

/// Majority vote over the `k` cosine-nearest training rows. Distance ties
/// break toward the lower training index; vote ties go to the tied class
/// whose member ranks nearest.
pub fn knn_predict(train: &Mat, labels: &[usize], query: &Mat, k: usize) -> Result<Vec<usize>> {
    ensure!(k > 0, "k must be positive");
    ensure!(
        train.nrows() == labels.len(),
        "{} training rows but {} labels",
        train.nrows(),
        labels.len()
    );
    ensure!(
        train.nrows() >= k,
        "k-NN with k = {k} needs at least {k} training samples, got {}",
        train.nrows()
    );
    ensure!(train.ncols() == query.ncols(), "train and query widths differ");
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(query
        .rows()
        .into_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (cosine_distance(q, t), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            let mut first_rank = vec![usize::MAX; classes];
            for (rank, &(_, i)) in d.iter().take(k).enumerate() {
                let c = labels[i];
                votes[c] += 1;
                first_rank[c] = first_rank[c].min(rank);
            }
            (0..classes)
                .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(first_rank[b].cmp(&first_rank[a])))
                .expect("at least one class")
        })
        .collect())
}

/// Accuracy of k-NN on PCA-reduced features, the PCA fitted on the train rows.
pub fn probe_accuracy(
    train: &Mat,
    train_labels: &[usize],
    test: &Mat,
    test_labels: &[usize],
    k: usize,
    pca_dims: usize,
) -> Result<f64> {
    ensure!(test.nrows() == test_labels.len() && test.nrows() > 0, "bad test set");
    let pca = Pca::fit(train, pca_dims)?;
    let pred = knn_predict(&pca.transform(train)?, train_labels, &pca.transform(test)?, k)?;
    super::metric_acc(&pred, test_labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    fn random(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = rng_for(seed, "knn-test", &[]);
        Mat::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn one_hot_features_are_perfect() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let x = Mat::from_shape_fn((30, 3), |(i, j)| f64::from(labels[i] == j));
        let acc = probe_accuracy(&x, &labels, &x, &labels, 5, 50).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn pca_rank_bound_and_orthonormal() {
        assert_eq!(Pca::fit(&random(10, 8, 0), 50).unwrap().dims(), 8);
        assert_eq!(Pca::fit(&random(5, 8, 0), 50).unwrap().dims(), 5);
        let p = Pca::fit(&random(40, 8, 1), 3).unwrap();
        assert_eq!(p.dims(), 3);
        let g = p.components.dot(&p.components.t());
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(g[[i, j]], f64::from(i == j), epsilon = 1e-10);
            }
        }
        // Projected variances decrease.
        let z = p.transform(&random(40, 8, 1)).unwrap();
        let var: Vec<f64> = (0..3).map(|j| z.column(j).mapv(|v| v * v).sum()).collect();
        assert!(var[0] >= var[1] && var[1] >= var[2]);
    }

    #[test]
    fn pca_finds_the_dominant_axis() {
        let mut rng = rng_for(4, "axis", &[]);
        let x = Mat::from_shape_fn((200, 3), |(_, j)| {
            let s = [5.0, 1.0, 0.1][j];
            s * rng.random_range(-1.0..1.0)
        });
        let p = Pca::fit(&x, 1).unwrap();
        assert_abs_diff_eq!(p.components[[0, 0]], 1.0, epsilon = 1e-2);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let train = random(100, 6, 2);
        let query = random(40, 6, 3);
        let mut rng = rng_for(5, "labels", &[]);
        let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..4)).collect();
        let got = knn_predict(&train, &labels, &query, 5).unwrap();
        for (qi, q) in query.rows().into_iter().enumerate() {
            // Oracle: full distance matrix, stable sort, plain counting.
            let mut all: Vec<(f64, usize)> = (0..100)
                .map(|i| {
                    let t = train.row(i);
                    let cos = q.dot(&t) / (q.dot(&q).sqrt() * t.dot(&t).sqrt());
                    (1.0 - cos, i)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let top: Vec<usize> = all[..5].iter().map(|p| labels[p.1]).collect();
            let best = (0..4).map(|c| top.iter().filter(|&&l| l == c).count()).max().unwrap();
            let winner = *top
                .iter()
                .find(|&&c| top.iter().filter(|&&l| l == c).count() == best)
                .unwrap();
            assert_eq!(got[qi], winner, "query {qi}");
        }
    }

    #[test]
    fn too_few_train_samples() {
        let x = random(4, 3, 0);
        assert!(knn_predict(&x, &[0, 1, 0, 1], &x, 5).is_err());
    }
}
