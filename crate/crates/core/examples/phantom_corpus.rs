// Generate a small synthetic PET/CT corpus and inspect one case.

use petmae::phantom::{generate_corpus, generate_phantom, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        shape: [24, 32, 32],
        ..PhantomConfig::default()
    };
    let p = generate_phantom(&cfg, 7)?;
    let body = p.body.iter().filter(|&&b| b).count();
    println!("phantom {:?} voxels, body {body}, {} lesions", p.ct.dims(), p.lesions.len());
    for l in &p.lesions {
        println!(
            "  lesion at {:.1?} mm, radius {:.1} mm, uptake {:.2}, {} voxels",
            l.center_mm, l.radius_mm, l.uptake, l.voxels
        );
    }

    let dir = tempfile::tempdir()?;
    let manifest = generate_corpus(&cfg, 4, 11, dir.path())?;
    for c in &manifest.cases {
        println!(
            "case {}: {} / {} / {}, lesion PET {:.2} vs background {:.2}",
            c.id, c.ct, c.pet, c.label, c.mean_pet_lesion, c.mean_pet_background
        );
    }
    Ok(())
}
