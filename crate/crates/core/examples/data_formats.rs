//! IDX round trips plus the synthetic datasets.

use svae::data::{augment_with_flips, encode_idx_images, parse_idx_images, synth_dataset, SynthKind};

fn main() -> svae::Result<()> {
    let shapes = synth_dataset(SynthKind::Shapes, 6, 12, 0)?;
    let bytes = encode_idx_images(&shapes.images)?;
    println!("idx payload: {} bytes, magic {:02x?}", bytes.len(), &bytes[..4]);
    let back = parse_idx_images(&bytes)?;
    println!("parsed {} images of {:?}, identical: {}", back.len(), back.shape(), back.images == shapes.images);

    let doubled = augment_with_flips(&shapes)?;
    println!("with flips: {} images", doubled.len());

    let blobs = synth_dataset(SynthKind::TwoGaussians, 200, 8, 0)?;
    for label in [0, 1] {
        let part = blobs.with_label(label)?;
        let mean = part.images.data().iter().sum::<f64>() / part.images.len() as f64;
        println!("two-gaussians label {label}: {} images, mean intensity {mean:.3}", part.len());
    }

    let first = &shapes.images.data()[..144];
    for row in first.chunks(12) {
        println!("{}", row.iter().map(|v| if *v > 0.0 { '#' } else { '.' }).collect::<String>());
    }
    Ok(())
}
