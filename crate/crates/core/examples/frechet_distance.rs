//! Fréchet distance between image sets under the built-in extractors.

use nalgebra::{DMatrix, DVector};
use svae::data::{synth_dataset, SynthKind};
use svae::fid::{fid_between_sets, frechet_distance, ExtractorSpec, GaussianStats};

fn main() -> svae::Result<()> {
    let a = GaussianStats { mu: DVector::from_vec(vec![0.0, 1.0]), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])) };
    let b = GaussianStats { mu: DVector::from_vec(vec![1.0, 1.0]), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])) };
    let r = frechet_distance(&a, &b)?;
    println!("diagonal pair: {:.6} (mean term {:.3}, trace term {:.3})", r.fid, r.mean_term, r.trace_term);

    let shapes = synth_dataset(SynthKind::Shapes, 400, 16, 1)?;
    let rects = shapes.with_label(0)?.images;
    let ellipses = shapes.with_label(1)?.images;
    let more = synth_dataset(SynthKind::Shapes, 400, 16, 2)?.with_label(0)?.images;
    for spec in ["identity", "pca:32", "random_conv:32"] {
        let ex = spec.parse::<ExtractorSpec>()?.build(&shapes.images, 0)?;
        let same = fid_between_sets(&rects, &more, &ex)?.fid;
        let other = fid_between_sets(&rects, &ellipses, &ex)?.fid;
        println!("{spec:>14}: rectangles vs rectangles {same:8.4}, rectangles vs ellipses {other:8.4}");
    }
    Ok(())
}
