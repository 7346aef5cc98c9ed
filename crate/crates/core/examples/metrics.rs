// Dice and HD95 between two boxes on an anisotropic grid.

use petmae::metrics::{dice, hd95, surface_voxels};

fn cube(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<bool> {
    let mut m = vec![false; dims.iter().product()];
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for x in lo[2]..hi[2] {
                m[(z * dims[1] + y) * dims[2] + x] = true;
            }
        }
    }
    m
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = [12, 16, 16];
    let spacing = [3.0, 2.0, 2.0];
    let reference = cube(dims, [3, 4, 4], [8, 12, 12]);
    println!("reference: {} surface voxels", surface_voxels(&reference, dims).len());
    for shift in 0..4 {
        let pred = cube(dims, [3, 4, 4 + shift], [8, 12, 12 + shift]);
        println!(
            "shift {shift} voxel(s) in x: dice {:.3}, hd95 {:.1} mm",
            dice(&pred, &reference)?,
            hd95(&pred, &reference, dims, spacing)?
        );
    }
    let empty = vec![false; reference.len()];
    println!("empty prediction: dice {}, hd95 {:.1} mm", dice(&empty, &reference)?, hd95(&empty, &reference, dims, spacing)?);
    Ok(())
}
