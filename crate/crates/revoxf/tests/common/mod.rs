//! Shared fixtures for integration tests: oracle scenes and grid baking.

use nalgebra::Vector3;
use revoxf::data::oracle::{Albedo, OracleScene, Primitive};
use revoxf::render::inverse_density_activation;
use revoxf::voxel::VoxelGrid;

/// Bake an analytic scene into a voxel grid: high density inside
/// primitives, near-zero outside, literal albedo colors (render with
/// `sigmoid_color = false`).
pub fn bake_oracle_grid(
    scene: &OracleScene,
    dims: [usize; 3],
    density_shift: f64,
    sigma_inside: f64,
) -> VoxelGrid {
    let (bmin, bmax) = scene.bbox();
    let mut grid = VoxelGrid::new(bmin, bmax, dims).unwrap();
    let raw_inside = inverse_density_activation(sigma_inside, density_shift);
    let raw_outside = inverse_density_activation(1e-9, density_shift);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = grid.node_position(x, y, z);
                let mut inside = None;
                for (i, prim) in scene.primitives.iter().enumerate() {
                    let hit = match prim {
                        Primitive::Sphere { center, radius, .. } => {
                            (p - Vector3::from(*center)).norm() <= *radius
                        }
                        Primitive::Box { min, max, .. } => (0..3).all(|a| {
                            p[a] >= min[a] && p[a] <= max[a]
                        }),
                    };
                    if hit {
                        inside = Some(i);
                        break;
                    }
                }
                match inside {
                    Some(i) => {
                        grid.set_density(x, y, z, raw_inside);
                        let albedo = match &scene.primitives[i] {
                            Primitive::Sphere { albedo, .. } => albedo,
                            Primitive::Box { albedo, .. } => albedo,
                        };
                        let c = match albedo {
                            Albedo::Constant { color } => *color,
                            // Detailed texture is irrelevant for geometry
                            // tests; sample the albedo at the node.
                            _ => [0.5, 0.5, 0.5],
                        };
                        grid.set_color(x, y, z, c);
                    }
                    None => {
                        grid.set_density(x, y, z, raw_outside);
                        grid.set_color(x, y, z, [0.0, 0.0, 0.0]);
                    }
                }
            }
        }
    }
    grid
}

/// Single matte sphere centered in the box.
pub fn sphere_scene() -> OracleScene {
    OracleScene {
        bbox_min: [-1.5, -1.5, -1.5],
        bbox_max: [1.5, 1.5, 1.5],
        background: [1.0, 1.0, 1.0],
        light_dir: [-0.3, 0.4, -0.85],
        ambient: 0.4,
        primitives: vec![Primitive::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.8,
            albedo: Albedo::Constant {
                color: [0.75, 0.3, 0.2],
            },
        }],
    }
}

/// Two fronto-parallel planes (thin boxes): a big far wall that covers the
/// whole frustum and a small near plate that occludes part of it. The
/// camera rig looks along +y.
pub fn two_plane_scene() -> OracleScene {
    OracleScene {
        bbox_min: [-4.0, -1.0, -4.0],
        bbox_max: [4.0, 3.0, 4.0],
        background: [1.0, 1.0, 1.0],
        light_dir: [0.2, 0.9, -0.4],
        ambient: 0.5,
        primitives: vec![
            // Near plate.
            Primitive::Box {
                min: [-0.45, 0.9, -0.45],
                max: [0.45, 1.0, 0.45],
                albedo: Albedo::Constant {
                    color: [0.8, 0.25, 0.2],
                },
            },
            // Far wall, large enough to cover src and dst frusta.
            Primitive::Box {
                min: [-3.9, 2.5, -3.9],
                max: [3.9, 2.6, 3.9],
                albedo: Albedo::Checker {
                    colors: [[0.2, 0.4, 0.8], [0.85, 0.85, 0.3]],
                    scale: 0.5,
                },
            },
        ],
    }
}
