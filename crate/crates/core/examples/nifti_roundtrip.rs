// Write a volume as NIfTI-1, read it back and print the header geometry.

use petmae::nifti::{encode_nifti, parse_header, read_nifti, write_nifti, HEADER_SIZE};
use petmae::volume::{ChannelLabel, Volume};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = [4, 5, 6];
    let data = (0..120).map(|i| i as f64 * 0.5 - 10.0).collect();
    let v = Volume::new(data, dims, [3.0, 2.0, 2.0], [-12.0, 4.5, 0.0], vec![ChannelLabel::Ct])?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("ramp.nii");
    write_nifti(&v, &path)?;
    let back = read_nifti(&path)?;
    let h = parse_header(&encode_nifti(&v)?[..HEADER_SIZE])?;
    println!("dims zyx {:?}, spacing zyx {:?}, origin zyx {:?}", h.dims_zyx(), h.spacing_zyx(), h.origin_zyx());
    println!("datatype {}, vox_offset {}", h.datatype_code, h.vox_offset);
    println!("round trip exact: {}", back.data() == v.data() && back.spacing() == v.spacing());
    Ok(())
}
