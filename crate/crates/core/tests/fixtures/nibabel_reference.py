"""Reference NIfTI-1 files written by nibabel.

ref_4x4x4.nii is little-endian float32, ref_4x4x4_be.nii the same image
stored big-endian. ref_4x4x4.json records what nibabel reports.
"""

import json
import pathlib

import nibabel as nib
import numpy as np

here = pathlib.Path(__file__).parent
data = (np.arange(64, dtype=np.float32) * 0.25 - 3.0).reshape(4, 4, 4)  # x, y, z
zooms = (1.5, 2.0, 2.5)
affine = np.diag([*zooms, 1.0])
affine[:3, 3] = [-10.0, 5.0, 2.5]

for name, order in [("ref_4x4x4.nii", "<"), ("ref_4x4x4_be.nii", ">")]:
    hdr = nib.Nifti1Header(endianness=order)
    img = nib.Nifti1Image(data.astype(order + "f4"), affine, hdr)
    img.header.set_zooms(zooms)
    img.set_qform(affine, code=1)
    img.set_sform(affine, code=1)
    nib.save(img, here / name)

img = nib.load(here / "ref_4x4x4.nii")
report = {
    "shape_xyz": list(img.shape),
    "zooms_xyz": [float(z) for z in img.header.get_zooms()],
    "origin_xyz": [float(v) for v in img.affine[:3, 3]],
    "datatype": int(img.header["datatype"]),
    "value_xyz_1_2_3": float(img.get_fdata()[1, 2, 3]),
    "sum": float(img.get_fdata().sum()),
}
(here / "ref_4x4x4.json").write_text(json.dumps(report, indent=2) + "\n")
print(report)
