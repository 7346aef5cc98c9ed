// Crop, resample, normalize and stack one CT/PET pair.

use petmae::harmonize::{harmonize_case, HarmonizeOptions};
use petmae::phantom::{generate_phantom, PhantomConfig};
use petmae::volume::spacing_from_xyz;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        shape: [24, 40, 40],
        ..PhantomConfig::default()
    };
    let p = generate_phantom(&cfg, 3)?;
    println!("raw {:?} at {:?} mm", p.ct.dims(), p.ct.spacing());

    for xyz in [[2.0, 2.0, 3.0], [3.0, 3.0, 4.0]] {
        let opts = HarmonizeOptions {
            spacing: spacing_from_xyz(xyz),
            ..HarmonizeOptions::default()
        };
        let h = harmonize_case(&p.ct, &p.pet, Some(&p.label), &opts)?;
        let lesion: f64 = h.label.as_ref().map_or(0.0, |l| l.data().iter().sum());
        println!(
            "spacing xyz {xyz:?}: {:?} x {} channels, CT mu {:.1} sigma {:.1}, PET mu {:.2} sigma {:.2}, {lesion} lesion voxels",
            h.image.dims(),
            h.image.channels(),
            h.ct_stats.mu,
            h.ct_stats.sigma,
            h.pet_stats.mu,
            h.pet_stats.sigma
        );
    }
    Ok(())
}
