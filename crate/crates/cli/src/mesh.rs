//! Naive cube-per-voxel OBJ export.

use std::fmt::Write;

use mpgan::voxel::VoxelGrid;

const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Outward-facing triangles over the corner indices above.
const TRIANGLES: [[usize; 3]; 12] = [
    [0, 3, 2], [0, 2, 1], // z = 0
    [4, 5, 6], [4, 6, 7], // z = 1
    [0, 1, 5], [0, 5, 4], // y = 0
    [3, 7, 6], [3, 6, 2], // y = 1
    [0, 4, 7], [0, 7, 3], // x = 0
    [1, 2, 6], [1, 6, 5], // x = 1
];

/// One closed cube (8 vertices, 12 triangles) per voxel at or above
/// `threshold`, in voxel units.
pub fn to_obj(grid: &VoxelGrid, threshold: f32) -> String {
    let n = grid.resolution();
    let mut out = String::from("# cube-per-voxel export\n");
    let mut cubes = 0usize;
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if grid.get(x, y, z) < threshold {
                    continue;
                }
                for c in CORNERS {
                    let _ = writeln!(out, "v {} {} {}", x + c[0], y + c[1], z + c[2]);
                }
                let base = cubes * 8 + 1;
                for t in TRIANGLES {
                    let _ = writeln!(out, "f {} {} {}", base + t[0], base + t[1], base + t[2]);
                }
                cubes += 1;
            }
        }
    }
    out
}
