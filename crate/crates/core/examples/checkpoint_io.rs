//! Round-trips volumes through NIfTI-1 and the raw container, and a network
//! through its checkpoint format.

use ddm2::backbone::{self, Conditioning, DenoiserHandle, DenoiserSpec};
use ddm2::data_io::{IngestFormat, NormalizationMode, export, ingest, normalize, write_nifti1};
use ddm2::evalsim::{PhantomSpec, make_phantom};

fn main() -> ddm2::Result<()> {
    let dir = std::env::temp_dir().join("ddm2_checkpoint_io");
    std::fs::create_dir_all(&dir).map_err(|e| ddm2::Error::io(&dir, e))?;
    let (_, noisy) = make_phantom(&PhantomSpec::desk(0.08, 1))?;

    let nii = dir.join("noisy.nii");
    write_nifti1(&noisy, &nii)?;
    let back = ingest(&nii, IngestFormat::Nifti1)?;
    println!("NIfTI round trip {:?}: identical = {}", back.dims(), back.data() == noisy.data());

    let x = normalize(&back, NormalizationMode::GlobalMinmax)?;
    let raw = dir.join("noisy.ddm2vol");
    export(&x, &raw, Some("0"))?;
    let again = ingest(&raw, IngestFormat::RawContainer)?;
    println!("container round trip keeps normalisation: {}", again.normalization == x.normalization);

    let spec = DenoiserSpec::new(3, Conditioning::NoiseLevelScalar).with_size(2, 8);
    let h = DenoiserHandle::new(spec, 5)?;
    let ckpt = dir.join("f.ckpt");
    backbone::save(&h, &ckpt)?;
    let loaded = backbone::load_expecting(&ckpt, &spec)?;
    println!("checkpoint {}: fingerprint preserved = {}", ckpt.display(), loaded.fingerprint == h.fingerprint);
    let wrong = DenoiserSpec::new(1, Conditioning::NoiseLevelScalar).with_size(2, 8);
    println!("loading with another spec fails: {}", backbone::load_expecting(&ckpt, &wrong).is_err());
    Ok(())
}
