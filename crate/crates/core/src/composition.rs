//! How a framing and an image are combined before classification.
//!
//! * `Vanilla`: the framing surrounds the image, which grows by `2W` per axis.
//! * `FrameAndResize`: as vanilla, then the framed image is resized back to `h x w`.
//! * `ResizeAndFrame`: the image is shrunk to `(h-2W) x (w-2W)` and then framed.
//! * `Occlude`: the framing overwrites the outer `W` pixels of the image.
//!
//! Vanilla and frame-and-resize use a framing whose interior is `h x w`;
//! the other two use one whose interior is `(h-2W) x (w-2W)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::framing::{FramingParams, Provenance};
use crate::tensor::{FrameGeom, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Vanilla,
    FrameAndResize,
    ResizeAndFrame,
    Occlude,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Vanilla,
        Strategy::FrameAndResize,
        Strategy::ResizeAndFrame,
        Strategy::Occlude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::FrameAndResize => "frame-resize",
            Strategy::ResizeAndFrame => "resize-frame",
            Strategy::Occlude => "occlude",
        }
    }

    /// Whether the framing interior matches the original image (as opposed to
    /// the image shrunk by `2W`).
    pub fn frames_full_image(self) -> bool {
        matches!(self, Strategy::Vanilla | Strategy::FrameAndResize)
    }

    /// Strategies that may reuse a framing trained under `self`.
    pub fn shares_framing_with(self, other: Strategy) -> bool {
        self.frames_full_image() == other.frames_full_image()
    }

    /// Interior dims a framing of width `w` must have for an `h x w` image.
    pub fn framing_interior(self, width: usize, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        if self.frames_full_image() {
            Ok((h, w))
        } else if h > 2 * width && w > 2 * width {
            Ok((h - 2 * width, w - 2 * width))
        } else {
            Err(Error::Geometry(format!(
                "{}: a {h}x{w} image cannot give up a border of width {width}",
                self.name()
            )))
        }
    }

    /// Spatial dims of the classifier input.
    pub fn output_dims(self, width: usize, (h, w): (usize, usize)) -> (usize, usize) {
        match self {
            Strategy::Vanilla => (h + 2 * width, w + 2 * width),
            _ => (h, w),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "frame-resize" | "frame-and-resize" | "f&r" => Ok(Strategy::FrameAndResize),
            "resize-frame" | "resize-and-frame" | "r&f" => Ok(Strategy::ResizeAndFrame),
            "occlude" => Ok(Strategy::Occlude),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Checks that `fp` can be composed with `h x w` inputs under `strategy`.
pub fn check_compatible(fp: &FramingParams, strategy: Strategy, dims: (usize, usize)) -> Result<()> {
    let expected = strategy.framing_interior(fp.width(), dims)?;
    let actual = (fp.interior_h(), fp.interior_w());
    if actual != expected {
        return Err(Error::Geometry(format!(
            "{strategy} on {}x{} inputs needs a framing interior of {}x{}, got {}x{}",
            dims.0, dims.1, expected.0, expected.1, actual.0, actual.1
        )));
    }
    if let Provenance::Trained(trained) = fp.provenance() {
        if !trained.shares_framing_with(strategy) {
            return Err(Error::Geometry(format!(
                "a framing trained under {trained} cannot be used with {strategy}"
            )));
        }
    }
    Ok(())
}

/// Records `strategy` on `tape`. `images` holds the original inputs (rank 4
/// or 5, spatial axes last); `border` holds materialized framing values.
pub fn compose_tape<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    border: Var,
    geom: FrameGeom,
    strategy: Strategy,
) -> Result<Var> {
    let shape = tape.value(images).shape().to_vec();
    if shape.len() < 4 {
        return Err(Error::shape("compose", format!("expected a batch of images or clips, got {shape:?}")));
    }
    let dims = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let expected = strategy.framing_interior(geom.width, dims)?;
    if (geom.interior_h, geom.interior_w) != expected {
        return Err(Error::Geometry(format!(
            "{strategy} on {}x{} inputs needs a framing interior of {}x{}, got {}x{}",
            dims.0, dims.1, expected.0, expected.1, geom.interior_h, geom.interior_w
        )));
    }
    let w = geom.width;
    match strategy {
        Strategy::Vanilla => tape.frame(images, border, geom),
        Strategy::FrameAndResize => {
            let framed = tape.frame(images, border, geom)?;
            tape.resize_bilinear(framed, dims.0, dims.1)
        }
        Strategy::ResizeAndFrame => {
            let small = tape.resize_bilinear(images, expected.0, expected.1)?;
            tape.frame(small, border, geom)
        }
        Strategy::Occlude => {
            let inner = tape.crop(images, (w, w), expected)?;
            tape.frame(inner, border, geom)
        }
    }
}

/// Composes a whole batch (N x 3 x h x w or N x 3 x T x h x w).
pub fn compose_batch(batch: &Tensor<f32>, fp: &FramingParams, strategy: Strategy) -> Result<Tensor<f32>> {
    let s = batch.shape();
    if s.len() < 4 {
        return Err(Error::shape("compose", format!("expected a batch, got {s:?}")));
    }
    check_compatible(fp, strategy, (s[s.len() - 2], s[s.len() - 1]))?;
    let mut tape = Tape::<f32>::new();
    let images = tape.constant(batch.clone());
    let border = tape.constant(fp.materialized_tensor()?);
    let out = compose_tape(&mut tape, images, border, fp.geometry(), strategy)?;
    Ok(tape.value(out).clone())
}

/// Composes one `3 x h x w` image.
pub fn compose(image: &Tensor<f32>, fp: &FramingParams, strategy: Strategy) -> Result<Tensor<f32>> {
    if image.rank() != 3 {
        return Err(Error::shape("compose", format!("expected 3 x h x w, got {:?}", image.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let out = compose_batch(&image.clone().reshape(shape)?, fp, strategy)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

/// Half-pixel-centre bilinear resize of a `C x h x w` (or any `... x h x w`) tensor.
pub fn bilinear_resize<T: Scalar>(image: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::<T>::new();
    let x = tape.constant(image.clone());
    let y = tape.resize_bilinear(x, new_h, new_w)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framing::{baseline_framing, Baseline, ChannelMode, FramingParams};
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn image(h: usize, w: usize, seed: u32) -> Tensor<f32> {
        let data = (0..3 * h * w).map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let img = image(7, 9, 1);
        assert_eq!(bilinear_resize(&img, 7, 9).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Tensor::<f64>::full(&[3, 5, 6], 0.375);
        for (h, w) in [(1, 1), (3, 11), (10, 4)] {
            let out = bilinear_resize(&img, h, w).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_centre_is_half() {
        // Centre output pixel samples source coordinate (0.5, 0.5): equal weights on all four.
        let img = Tensor::<f64>::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = bilinear_resize(&img, 3, 3).unwrap();
        assert_eq!(out.data()[4], 0.5);
    }

    #[test]
    fn vanilla_grows_by_two_w() {
        let fp = FramingParams::standard_normal(3, 32, 32, ChannelMode::Color, 0).unwrap();
        let out = compose(&image(32, 32, 0), &fp, Strategy::Vanilla).unwrap();
        assert_eq!(out.shape(), &[3, 38, 38]);
    }

    #[test]
    fn occlude_overwrites_exactly_the_border() {
        let (h, w, width) = (20, 24, 3);
        let img = image(h, w, 5);
        let fp = baseline_framing(Baseline::Black, width, h - 2 * width, w - 2 * width, ChannelMode::Color).unwrap();
        let out = compose(&img, &fp, Strategy::Occlude).unwrap();
        assert_eq!(out.shape(), &[3, h, w]);
        let mut changed = 0;
        for r in 0..h {
            for c in 0..w {
                let inside = r >= width && r < h - width && c >= width && c < w - width;
                let same = (0..3).all(|ch| out.data()[(ch * h + r) * w + c] == img.data()[(ch * h + r) * w + c]);
                if inside {
                    assert!(same);
                } else {
                    assert!((0..3).all(|ch| out.data()[(ch * h + r) * w + c] == 0.0));
                    changed += 1;
                }
            }
        }
        assert_eq!(changed, 2 * width * (h + w - 2 * width));
    }

    #[test]
    fn mismatched_geometry_names_strategy() {
        let fp = FramingParams::standard_normal(2, 32, 32, ChannelMode::Color, 0).unwrap();
        let err = compose(&image(32, 32, 0), &fp, Strategy::ResizeAndFrame).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("resize-frame") && msg.contains("28x28"), "{msg}");
    }

    #[test]
    fn trained_framing_reuse_is_enforced() {
        let mut fp = FramingParams::standard_normal(2, 28, 28, ChannelMode::Color, 0).unwrap();
        fp.set_provenance(Provenance::Trained(Strategy::ResizeAndFrame));
        assert!(compose(&image(32, 32, 0), &fp, Strategy::Occlude).is_ok());
        let mut fv = FramingParams::standard_normal(2, 32, 32, ChannelMode::Color, 0).unwrap();
        fv.set_provenance(Provenance::Trained(Strategy::Vanilla));
        assert!(compose(&image(32, 32, 0), &fv, Strategy::FrameAndResize).is_ok());
        // Same geometry, wrong training family.
        let mut odd = FramingParams::standard_normal(2, 32, 32, ChannelMode::Color, 0).unwrap();
        odd.set_provenance(Provenance::Trained(Strategy::Occlude));
        assert!(check_compatible(&odd, Strategy::Vanilla, (36, 36)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn output_dims_contract(h in 8usize..40, w in 8usize..40, width in 1usize..4, which in 0usize..4) {
            let strategy = Strategy::ALL[which];
            let (ih, iw) = strategy.framing_interior(width, (h, w)).unwrap();
            let fp = FramingParams::standard_normal(width, ih, iw, ChannelMode::Color, 1).unwrap();
            let out = compose(&image(h, w, 2), &fp, strategy).unwrap();
            let (oh, ow) = strategy.output_dims(width, (h, w));
            prop_assert_eq!(out.shape(), &[3, oh, ow][..]);
            if strategy == Strategy::Vanilla {
                prop_assert_eq!((oh, ow), (h + 2 * width, w + 2 * width));
            } else {
                prop_assert_eq!((oh, ow), (h, w));
            }
        }
    }
}
