// Tile a whole volume with overlapping windows and segment it.

use petmae::autonet::{build_unet, UNetConfig};
use petmae::infer::{plan_windows, segment, sliding_infer, Identity};
use petmae::phantom::{generate_phantom, PhantomConfig};
use petmae::volume::concat_channels;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = generate_phantom(&PhantomConfig::default(), 9)?;
    let image = concat_channels(&p.ct, &p.pet)?;
    for overlap in [0.0, 0.5, 0.75] {
        let plan = plan_windows(image.dims(), [24, 32, 32], overlap)?;
        println!("overlap {overlap}: stride {:?}, {} windows", plan.stride, plan.corners.len());
    }

    let plan = plan_windows(image.dims(), [24, 32, 32], 0.5)?;
    let same = sliding_infer(&Identity, &image, &plan)?;
    println!("identity model reproduces the input: {}", same.data() == image.data());

    let net = build_unet(&UNetConfig::default())?;
    let mask = segment(&net, &image, [24, 32, 32], 0.5)?;
    let fg = mask.data().iter().filter(|&&v| v > 0.5).count();
    println!("untrained network marks {fg} of {} voxels as foreground", mask.voxels());
    Ok(())
}
