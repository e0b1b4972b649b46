//! Lifts image-plane features into the voxel grid.
//!
//! Every pixel's feature vector is spread along its viewing ray, weighted
//! by the pixel's depth distribution, producing one feature point per
//! (bin, pixel) pair. Points are then pooled into voxels by averaging
//! whatever lands in each cell. Pooling is average rather than sum so a
//! voxel crossed by many rays is no louder than one crossed by few.

use crate::depth::DepthBins;
use crate::scene::{CameraIntrinsics, CameraPose, VoxelGridSpec};
use cdscene_tensor::sample::{scatter_mean, trilinear_sample3d};
use cdscene_tensor::Tensor;
use ndarray::{Array2, ArrayD, IxDyn};

/// Ray-spread features before voxel pooling. Row r of `data` is the
/// feature at world point `coords` row r; rows run depth-major, then
/// image row, then image column.
pub struct FrustumFeatures {
    /// `(D*h*w, C)` weighted features.
    pub data: Tensor,
    /// `(D*h*w, 3)` world-space sample points (plain data, no gradients).
    pub coords: ArrayD<f64>,
}

/// Outer product of the depth distribution `(D,h,w)` with the feature map
/// `(C,h,w)`: each pixel contributes its feature scaled by the bin weight
/// at every bin center along its ray.
pub fn outer_lift(
    features: &Tensor,
    depth_dist: &Tensor,
    pose: &CameraPose,
    intr_feat: &CameraIntrinsics,
    bins: &DepthBins,
) -> FrustumFeatures {
    let fs = features.shape();
    let ds = depth_dist.shape();
    assert_eq!(&fs[1..], &ds[1..], "feature and depth grids must align");
    assert_eq!(ds[0], bins.count, "depth distribution must match the bins");
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let d = bins.count;

    let weighted = depth_dist
        .reshape(&[d, 1, h, w])
        .mul(&features.reshape(&[1, c, h, w]));
    let data = weighted.permute(&[0, 2, 3, 1]).reshape(&[d * h * w, c]);

    let centers = bins.centers();
    let mut coords = ArrayD::zeros(IxDyn(&[d * h * w, 3]));
    for (di, z) in centers.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let p = pose.unproject(intr_feat, j as f64 + 0.5, i as f64 + 0.5, *z);
                let row = di * h * w + i * w + j;
                coords[[row, 0]] = p[0];
                coords[[row, 1]] = p[1];
                coords[[row, 2]] = p[2];
            }
        }
    }
    FrustumFeatures { data, coords }
}

/// Averages frustum points into the voxel grid. Points outside the grid
/// are dropped. Returns the volume `(C,X,Y,Z)` and the per-cell point
/// counts in the same x-major order used by the volume layout.
pub fn voxel_pool(frustum: &FrustumFeatures, spec: &VoxelGridSpec) -> (Tensor, Vec<usize>) {
    let n = frustum.coords.shape()[0];
    let c = frustum.data.shape()[1];
    let [dx, dy, dz] = spec.dims;
    let mut cells = Vec::with_capacity(n);
    for r in 0..n {
        let p = [
            frustum.coords[[r, 0]],
            frustum.coords[[r, 1]],
            frustum.coords[[r, 2]],
        ];
        cells.push(match spec.cell_of(p) {
            Some([x, y, z]) => (x * dy * dz + y * dz + z) as isize,
            None => -1,
        });
    }
    let (pooled, counts) = scatter_mean(&frustum.data, &cells, spec.n_cells());
    let volume = pooled.permute(&[1, 0]).reshape(&[c, dx, dy, dz]);
    (volume, counts)
}

/// Reads the volume `(C,X,Y,Z)` at world points `(N,3)` with trilinear
/// interpolation between voxel centers, clamping at the grid border.
/// Returns `(C,N)`.
pub fn grid_sample_3d(volume: &Tensor, points: &ArrayD<f64>, spec: &VoxelGridSpec) -> Tensor {
    let n = points.shape()[0];
    let vs = spec.voxel_size();
    let mut cell_pts = Array2::zeros((n, 3));
    for r in 0..n {
        for a in 0..3 {
            cell_pts[[r, a]] = (points[[r, a]] - spec.origin[a]) / vs[a] - 0.5;
        }
    }
    trilinear_sample3d(volume, &cell_pts)
}
