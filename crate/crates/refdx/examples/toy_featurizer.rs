//! Deterministic image features for demos that have no neural encoder.

use image::{Rgb, RgbImage};
use refdx::Featurizer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let featurizer = Featurizer::new(128, 0);
    let gradient = RgbImage::from_fn(96, 96, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, 128]));
    let mut spotted = gradient.clone();
    for y in 60..90 {
        for x in 60..90 {
            spotted.put_pixel(x, y, Rgb([250, 240, 40]));
        }
    }
    let flat = RgbImage::from_pixel(64, 64, Rgb([90, 90, 90]));

    let g = featurizer.featurize(&gradient)?;
    println!("dim {}, first values {:?}", g.dim(), &g.values()[..4]);
    println!("gradient vs itself:  {:.6}", g.similarity(&featurizer.featurize(&gradient)?)?);
    println!("gradient vs spotted: {:.6}", g.similarity(&featurizer.featurize(&spotted)?)?);
    println!("gradient vs flat:    {:.6}", g.similarity(&featurizer.featurize(&flat)?)?);

    let tiny = RgbImage::new(16, 16);
    println!("16x16 image: {}", featurizer.featurize(&tiny).unwrap_err());
    Ok(())
}
