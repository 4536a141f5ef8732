use crate::gradcore::Tensor;

pub type Point3 = [f64; 3];

/// An ordered set of 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Copy translated so that the centroid sits at the origin.
    pub fn centered(&self) -> Self {
        let c = self.centroid();
        Self::new(self.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect())
    }

    /// N×3 row-major matrix of coordinates.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(self.len(), 3, |i, j| self.points[i][j])
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    distance_sq(a, b).sqrt()
}

pub fn distance_sq(a: Point3, b: Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Indices of the `k` nearest other points of every point, nearest first.
///
/// Ties in distance go to the lower index. The caller guarantees `k < n`.
pub(crate) fn nearest_neighbors(cloud: &PointCloud, k: usize) -> Vec<Vec<usize>> {
    let pts = cloud.points();
    let n = pts.len();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            order.clear();
            order.extend((0..n).filter(|&j| j != i).map(|j| (distance_sq(pts[i], pts[j]), j)));
            // total order on (distance, index); select then sort the head
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < order.len() {
                order.select_nth_unstable_by(k, cmp);
                order.truncate(k);
            }
            order.sort_by(cmp);
            order.iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_of_square() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 2.0, 0.0], [0.0, 2.0, 0.0]]);
        assert_eq!(c.centroid(), [1.0, 1.0, 0.0]);
        assert_eq!(c.centered().centroid(), [0.0, 0.0, 0.0]);
    }
}
