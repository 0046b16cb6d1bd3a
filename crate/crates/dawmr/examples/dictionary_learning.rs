//! Learn vector-quantization dictionaries from image patches with OMP-1 and
//! K-means, and watch both objectives decrease.
//!
//! ```text
//! cargo run --example dictionary_learning
//! ```

use dawmr::features::{
    encode, extract_patch, learn_dictionary_kmeans_traced, learn_dictionary_omp1_traced,
    ChannelGroup, EncoderConfig, PatchSpec,
};
use dawmr::volume::{generate_synthetic, BoundingBox, Dims, SyntheticParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dawmr::Result<()> {
    let dims = Dims::new(40, 40, 40);
    let (image, _) = generate_synthetic(dims, &SyntheticParams::default(), 3)?;

    // Sample 4000 random 5^3 patches from the interior.
    let spec = PatchSpec::cube(5, ChannelGroup::Image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let window = BoundingBox::whole(dims).shrunk([2; 3]);
    let patches: Vec<Vec<f32>> = (0..4000)
        .map(|_| {
            let center = dawmr::volume::VoxelCoord::new(
                rng.gen_range(window.lo.x..window.hi.x),
                rng.gen_range(window.lo.y..window.hi.y),
                rng.gen_range(window.lo.z..window.hi.z),
            );
            extract_patch(&image, center, &spec)
        })
        .collect::<dawmr::Result<_>>()?;

    let (omp, omp_errors) = learn_dictionary_omp1_traced(&patches, &spec, 32, 10, 1)?;
    println!("OMP-1, k = 32: 1-sparse reconstruction error per epoch");
    for (i, e) in omp_errors.iter().enumerate() {
        println!("  epoch {i:2}: {e:12.1}");
    }

    let (km, km_errors) = learn_dictionary_kmeans_traced(&patches, &spec, 32, 10, 1)?;
    println!("K-means, k = 32: within-cluster SSE per epoch");
    for (i, e) in km_errors.iter().enumerate() {
        println!("  epoch {i:2}: {e:12.1}");
    }

    // Encode one patch with each scheme.
    let soft = EncoderConfig::soft_threshold(0.25);
    let f = encode(&omp, &soft, &patches[0])?;
    println!(
        "soft-threshold encoding: length {} (2k), {} active",
        f.len(),
        f.iter().filter(|&&v| v > 0.0).count()
    );
    let triangle = EncoderConfig::triangle();
    let g = encode(&km, &triangle, &patches[0])?;
    println!(
        "triangle encoding:       length {} (k),  {} active",
        g.len(),
        g.iter().filter(|&&v| v > 0.0).count()
    );
    Ok(())
}
