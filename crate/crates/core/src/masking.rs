//! Augmented views: remove low-relevance image regions before the second
//! decoding pass.
//!
//! The masking ratio is `clamp(sim, 0, 1) / 2`, the fraction of the image
//! that is removed. Hard strategies rank by relevance ascending with ties
//! broken by ascending pixel or patch index and mask exactly
//! `floor(r · N)` elements, so masks for a smaller ratio are always a subset
//! of masks for a larger one.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::matching::CorrelationMap;
use crate::numeric::{Matrix, SeededRng};

/// Grayscale image with values in [0, 1], tiled into square patches.
///
/// Patches are numbered row-major over the patch grid; pixels row-major over
/// the image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    width: usize,
    height: usize,
    patch: usize,
    values: Vec<f64>,
}

impl GridImage {
    pub fn new(width: usize, height: usize, patch: usize, values: Vec<f64>) -> Result<Self> {
        if patch == 0 || width == 0 || height == 0 || width % patch != 0 || height % patch != 0 {
            return contract(format!("{width}x{height} image is not divisible into {patch}px patches"));
        }
        if values.len() != width * height {
            return contract(format!("{} pixel values for a {width}x{height} image", values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return contract("pixel values must lie in [0, 1]");
        }
        Ok(Self { width, height, patch, values })
    }

    pub fn filled(width: usize, height: usize, patch: usize, value: f64) -> Result<Self> {
        Self::new(width, height, patch, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel_count(&self) -> usize {
        self.values.len()
    }

    pub fn grid_width(&self) -> usize {
        self.width / self.patch
    }

    pub fn grid_height(&self) -> usize {
        self.height / self.patch
    }

    pub fn patch_count(&self) -> usize {
        self.grid_width() * self.grid_height()
    }

    /// Patch index containing pixel `p`.
    pub fn patch_of_pixel(&self, p: usize) -> usize {
        let (x, y) = (p % self.width, p / self.width);
        (y / self.patch) * self.grid_width() + x / self.patch
    }

    /// Pixel indices of patch `j`, row-major within the tile.
    pub fn patch_pixels(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        let (px, py) = (j % self.grid_width(), j / self.grid_width());
        let (x0, y0) = (px * self.patch, py * self.patch);
        (0..self.patch).flat_map(move |dy| (0..self.patch).map(move |dx| (y0 + dy) * self.width + x0 + dx))
    }

    /// Flattened tile `j`, row-major.
    pub fn tile(&self, j: usize) -> Vec<f64> {
        self.patch_pixels(j).map(|p| self.values[p]).collect()
    }

    pub fn set_pixel(&mut self, p: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v));
        self.values[p] = v;
    }

    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(self.width, self.height, self.patch, self.values.iter().map(|v| v * a).collect())
    }

    /// ASCII PGM (P2, maxval 255), gray = round(value · 255).
    pub fn to_pgm(&self) -> String {
        let grays: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        encode_pgm(self.width, self.height, &grays)
    }

    pub fn from_pgm(text: &str, patch: usize) -> Result<Self> {
        let (width, height, maxval, grays) = decode_pgm(text)?;
        let values = grays.into_iter().map(|g| g as f64 / maxval as f64).collect();
        Self::new(width, height, patch, values)
    }
}

/// Serialize 8-bit grays as ASCII PGM with maxval 255, one image row per line.
pub fn encode_pgm(width: usize, height: usize, grays: &[u8]) -> String {
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in grays.chunks(width.max(1)).take(height) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn decode_pgm(text: &str) -> Result<(usize, usize, u32, Vec<u32>)> {
    let mut tokens = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return input("not an ASCII PGM (missing P2 magic)");
    }
    let mut number = |what: &str| -> Result<u32> {
        let tok = tokens.next().ok_or_else(|| crate::AglaError::Input(format!("PGM truncated before {what}")))?;
        tok.parse().map_err(|_| crate::AglaError::Input(format!("bad PGM {what}: {tok:?}")))
    };
    let width = number("width")? as usize;
    let height = number("height")? as usize;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return input(format!("PGM maxval {maxval} out of range"));
    }
    let mut grays = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let g = number("pixel")?;
        if g > maxval {
            return input(format!("PGM pixel {g} exceeds maxval {maxval}"));
        }
        grays.push(g);
    }
    Ok((width, height, maxval, grays))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Zero the lowest-scoring pixels (patch scores upsampled to pixels).
    Pixel,
    /// Zero whole lowest-scoring patches.
    Patch,
    /// Multiply pixels by min-max normalized patch scores.
    Soft,
    /// Zero rows of the patch feature matrix instead of pixels.
    Feature,
    /// Zero uniformly chosen pixels; ignores the scores.
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Pixel, Strategy::Patch, Strategy::Soft, Strategy::Feature, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Pixel => "pixel",
            Strategy::Patch => "patch",
            Strategy::Soft => "soft",
            Strategy::Feature => "feature",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = crate::AglaError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| crate::AglaError::Contract(format!("unknown masking strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: Strategy,
    pub ratio: f64,
    /// Only read by [`Strategy::Random`].
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(strategy: Strategy, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&ratio) {
            return contract(format!("masking ratio {ratio} outside [0, 0.5]"));
        }
        Ok(Self { strategy, ratio, seed })
    }
}

/// `clamp(sim, 0, 1) / 2`.
pub fn adaptive_ratio(sim: f64) -> f64 {
    sim.clamp(0.0, 1.0) / 2.0
}

/// `floor(r · n)` with a small guard so that e.g. 0.29 · 100 counts 29.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Nearest-neighbor upsampling: every pixel gets its patch's score.
pub fn upsample_scores(cor: &CorrelationMap, image: &GridImage) -> Result<Vec<f64>> {
    if cor.len() != image.patch_count() {
        return contract(format!("{} scores for {} patches", cor.len(), image.patch_count()));
    }
    Ok((0..image.pixel_count()).map(|p| cor.scores[image.patch_of_pixel(p)]).collect())
}

/// Indices of the `count` lowest scores, ties by ascending index.
fn lowest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentedContent {
    Image(GridImage),
    Features(Matrix),
}

/// Which elements were masked; `true` means removed.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    Pixels(Vec<bool>),
    Patches(Vec<bool>),
}

impl Mask {
    pub fn masked_count(&self) -> usize {
        match self {
            Mask::Pixels(m) | Mask::Patches(m) => m.iter().filter(|b| **b).count(),
        }
    }

    /// Pixel-level mask (patch masks are expanded) as PGM: 0 masked, 255 kept.
    pub fn to_pgm(&self, image: &GridImage) -> String {
        let grays: Vec<u8> = (0..image.pixel_count())
            .map(|p| {
                let masked = match self {
                    Mask::Pixels(m) => m[p],
                    Mask::Patches(m) => m[image.patch_of_pixel(p)],
                };
                if masked {
                    0
                } else {
                    255
                }
            })
            .collect();
        encode_pgm(image.width(), image.height(), &grays)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub content: AugmentedContent,
    pub mask: Mask,
    pub spec: MaskSpec,
    /// Similarity the ratio was derived from, when adaptive.
    pub sim: Option<f64>,
}

impl AugmentedView {
    pub fn image(&self) -> Option<&GridImage> {
        match &self.content {
            AugmentedContent::Image(img) => Some(img),
            AugmentedContent::Features(_) => None,
        }
    }

    pub fn features(&self) -> Option<&Matrix> {
        match &self.content {
            AugmentedContent::Features(f) => Some(f),
            AugmentedContent::Image(_) => None,
        }
    }
}

pub fn apply_mask(image: &GridImage, cor: &CorrelationMap, spec: &MaskSpec, features: &Matrix) -> Result<AugmentedView> {
    let spec = MaskSpec::new(spec.strategy, spec.ratio, spec.seed)?;
    if cor.len() != image.patch_count() {
        return contract(format!("{} scores for {} patches", cor.len(), image.patch_count()));
    }
    let n_pix = image.pixel_count();
    let k = image.patch_count();
    let (content, mask) = match spec.strategy {
        Strategy::Pixel => {
            let scores = upsample_scores(cor, image)?;
            let mut mask = vec![false; n_pix];
            let mut out = image.clone();
            for p in lowest(&scores, mask_count(spec.ratio, n_pix)) {
                mask[p] = true;
                out.set_pixel(p, 0.0);
            }
            (AugmentedContent::Image(out), Mask::Pixels(mask))
        }
        Strategy::Patch => {
            let mut mask = vec![false; k];
            let mut out = image.clone();
            for j in lowest(&cor.scores, mask_count(spec.ratio, k)) {
                mask[j] = true;
                for p in image.patch_pixels(j).collect::<Vec<_>>() {
                    out.set_pixel(p, 0.0);
                }
            }
            (AugmentedContent::Image(out), Mask::Patches(mask))
        }
        Strategy::Soft => {
            // r = 0 means nothing is removed.
            let out = if spec.ratio == 0.0 {
                image.clone()
            } else {
                let lo = cor.scores.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = cor.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weight = |j: usize| if hi > lo { (cor.scores[j] - lo) / (hi - lo) } else { 1.0 };
                let values = (0..n_pix).map(|p| image.values()[p] * weight(image.patch_of_pixel(p))).collect();
                GridImage::new(image.width(), image.height(), image.patch_size(), values)?
            };
            (AugmentedContent::Image(out), Mask::Pixels(vec![false; n_pix]))
        }
        Strategy::Feature => {
            if features.rows() != k {
                return contract(format!("feature matrix has {} rows for {k} patches", features.rows()));
            }
            let mut mask = vec![false; k];
            let mut out = features.clone();
            for j in lowest(&cor.scores, mask_count(spec.ratio, k)) {
                mask[j] = true;
                out.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
            }
            (AugmentedContent::Features(out), Mask::Patches(mask))
        }
        Strategy::Random => {
            let mut rng = SeededRng::new(spec.seed);
            let mut mask = vec![false; n_pix];
            let mut out = image.clone();
            for p in index::sample(&mut rng, n_pix, mask_count(spec.ratio, n_pix)) {
                mask[p] = true;
                out.set_pixel(p, 0.0);
            }
            (AugmentedContent::Image(out), Mask::Pixels(mask))
        }
    };
    Ok(AugmentedView { content, mask, spec, sim: None })
}

/// Ratio from the similarity score, then [`apply_mask`].
pub fn adaptive_mask(
    image: &GridImage,
    cor: &CorrelationMap,
    sim: f64,
    strategy: Strategy,
    seed: u64,
    features: &Matrix,
) -> Result<AugmentedView> {
    let spec = MaskSpec::new(strategy, adaptive_ratio(sim), seed)?;
    let mut view = apply_mask(image, cor, &spec, features)?;
    view.sim = Some(sim);
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(w: usize, h: usize, patch: usize) -> GridImage {
        let n = w * h;
        GridImage::new(w, h, patch, (0..n).map(|p| (p % 7) as f64 / 7.0 + 0.1).collect()).unwrap()
    }

    fn zero_features(k: usize) -> Matrix {
        Matrix::new(k, 3, vec![1.0; k * 3]).unwrap()
    }

    fn masked_set(mask: &Mask) -> Vec<usize> {
        match mask {
            Mask::Pixels(m) | Mask::Patches(m) => m.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect(),
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(adaptive_ratio(0.8), 0.4);
        assert_eq!(adaptive_ratio(0.0), 0.0);
        assert_eq!(adaptive_ratio(1.3), 0.5);
        assert_eq!(adaptive_ratio(-2.0), 0.0);
    }

    #[test]
    fn upsample_blocks() {
        let img = gradient_image(4, 4, 2);
        let cor = CorrelationMap::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_scores(&cor, &img).unwrap();
        #[rustfmt::skip]
        let want = vec![
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
            2.0, 2.0, 3.0, 3.0,
            2.0, 2.0, 3.0, 3.0,
        ];
        assert_eq!(up, want);

        let one = GridImage::filled(4, 4, 4, 0.5).unwrap();
        let up = upsample_scores(&CorrelationMap::new(vec![7.0]).unwrap(), &one).unwrap();
        assert!(up.iter().all(|v| *v == 7.0));
        assert!(upsample_scores(&CorrelationMap::new(vec![1.0]).unwrap(), &img).is_err());
    }

    #[test]
    fn upsample_permutes_with_patches() {
        let img = gradient_image(4, 4, 2);
        let a = upsample_scores(&CorrelationMap::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap(), &img).unwrap();
        let b = upsample_scores(&CorrelationMap::new(vec![1.0, 0.0, 3.0, 2.0]).unwrap(), &img).unwrap();
        // swapping patch columns swaps the two 2-pixel halves of every row
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(a[y * 4 + x], b[y * 4 + (x + 2) % 4]);
            }
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let img = gradient_image(8, 8, 4);
        let cor = CorrelationMap::new(vec![0.3, 0.1, 0.9, 0.2]).unwrap();
        for strategy in Strategy::ALL {
            let spec = MaskSpec::new(strategy, 0.0, 1).unwrap();
            let view = apply_mask(&img, &cor, &spec, &zero_features(4)).unwrap();
            match view.content {
                AugmentedContent::Image(out) => assert_eq!(out, img, "{strategy}"),
                AugmentedContent::Features(f) => assert_eq!(f, zero_features(4)),
            }
            assert_eq!(view.mask.masked_count(), 0);
        }
    }

    #[test]
    fn pixel_count_is_floor() {
        let img = GridImage::filled(10, 10, 5, 0.5).unwrap();
        let cor = CorrelationMap::new(vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        let spec = MaskSpec::new(Strategy::Pixel, 0.4, 0).unwrap();
        let view = apply_mask(&img, &cor, &spec, &zero_features(4)).unwrap();
        assert_eq!(view.mask.masked_count(), 40);
        let out = view.image().unwrap();
        assert_eq!(out.values().iter().filter(|v| **v == 0.0).count(), 40);
        // patch 1 (25 pixels) goes first, then 15 of patch 3 in pixel order
        assert!(img.patch_pixels(1).all(|p| out.values()[p] == 0.0));
        assert_eq!(img.patch_pixels(3).filter(|p| out.values()[*p] == 0.0).count(), 15);
    }

    #[test]
    fn equal_scores_mask_lowest_indices() {
        let img = GridImage::filled(4, 4, 2, 0.5).unwrap();
        let cor = CorrelationMap::new(vec![1.0; 4]).unwrap();
        let spec = MaskSpec::new(Strategy::Pixel, 0.25, 0).unwrap();
        let view = apply_mask(&img, &cor, &spec, &zero_features(4)).unwrap();
        assert_eq!(masked_set(&view.mask), vec![0, 1, 2, 3]);
    }

    #[test]
    fn patch_and_feature_strategies() {
        let img = gradient_image(8, 8, 4);
        let cor = CorrelationMap::new(vec![0.3, 0.1, 0.9, 0.2]).unwrap();
        let spec = MaskSpec::new(Strategy::Patch, 0.5, 0).unwrap();
        let view = apply_mask(&img, &cor, &spec, &zero_features(4)).unwrap();
        assert_eq!(masked_set(&view.mask), vec![1, 3]);
        let out = view.image().unwrap();
        for j in 0..4 {
            let zeroed = img.patch_pixels(j).all(|p| out.values()[p] == 0.0);
            assert_eq!(zeroed, j == 1 || j == 3);
        }

        let y = Matrix::new(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let spec = MaskSpec::new(Strategy::Feature, 0.25, 0).unwrap();
        let view = apply_mask(&img, &cor, &spec, &y).unwrap();
        let f = view.features().unwrap();
        assert_eq!(f.row(1), &[0.0, 0.0]);
        assert_eq!(f.row(0), y.row(0));
        assert_eq!(f.row(3), y.row(3));
    }

    #[test]
    fn soft_scales_by_normalized_score() {
        let img = GridImage::filled(4, 4, 2, 0.8).unwrap();
        let cor = CorrelationMap::new(vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let spec = MaskSpec::new(Strategy::Soft, 0.3, 0).unwrap();
        let out = apply_mask(&img, &cor, &spec, &zero_features(4)).unwrap();
        let out = out.image().unwrap();
        assert_eq!(out.values()[0], 0.0);
        assert!((out.values()[2] - 0.2).abs() < 1e-15);
        assert!((out.values()[15] - 0.8).abs() < 1e-15);

        let flat = CorrelationMap::new(vec![2.0; 4]).unwrap();
        let out = apply_mask(&img, &flat, &spec, &zero_features(4)).unwrap();
        assert_eq!(out.image().unwrap(), &img);
    }

    #[test]
    fn random_is_seeded() {
        let img = gradient_image(10, 10, 5);
        let cor = CorrelationMap::new(vec![1.0; 4]).unwrap();
        let run = |seed| {
            let spec = MaskSpec::new(Strategy::Random, 0.3, seed).unwrap();
            masked_set(&apply_mask(&img, &cor, &spec, &zero_features(4)).unwrap().mask)
        };
        assert_eq!(run(9).len(), 30);
        assert_eq!(run(9), run(9));
        for s in 0..10u64 {
            assert_ne!(run(2 * s), run(2 * s + 1));
        }
    }

    #[test]
    fn bad_inputs() {
        assert!(MaskSpec::new(Strategy::Pixel, 0.6, 0).is_err());
        assert!("blur".parse::<Strategy>().is_err());
        assert_eq!("soft".parse::<Strategy>().unwrap(), Strategy::Soft);
        assert!(GridImage::new(10, 10, 3, vec![0.0; 100]).is_err());
        let img = gradient_image(4, 4, 2);
        let spec = MaskSpec::new(Strategy::Feature, 0.5, 0).unwrap();
        let cor = CorrelationMap::new(vec![1.0; 4]).unwrap();
        assert!(apply_mask(&img, &cor, &spec, &zero_features(3)).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let img = GridImage::new(2, 2, 1, vec![0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0]).unwrap();
        let text = img.to_pgm();
        assert_eq!(text, "P2\n2 2\n255\n0 255\n128 3\n");
        assert_eq!(GridImage::from_pgm(&text, 1).unwrap(), img);
        assert!(GridImage::from_pgm("P5\n1 1\n255\n0", 1).is_err());
        assert!(GridImage::from_pgm("P2\n2 2\n255\n0 1 2", 1).is_err());
        let commented = "P2\n# made by hand\n1 1\n15\n15\n";
        assert_eq!(GridImage::from_pgm(commented, 1).unwrap().values(), &[1.0]);
    }

    #[test]
    fn mask_pgm_marks_masked_black() {
        let img = GridImage::filled(2, 2, 1, 0.5).unwrap();
        let mask = Mask::Patches(vec![true, false, false, true]);
        assert_eq!(mask.to_pgm(&img), "P2\n2 2\n255\n0 255\n255 0\n");
    }

    proptest! {
        #[test]
        fn hard_masks_nest(scores in prop::collection::vec(0.0f64..1.0, 16), r1 in 0.0f64..0.5, r2 in 0.0f64..0.5) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let img = gradient_image(16, 16, 4);
            let cor = CorrelationMap::new(scores).unwrap();
            for strategy in [Strategy::Pixel, Strategy::Patch] {
                let a = apply_mask(&img, &cor, &MaskSpec::new(strategy, lo, 0).unwrap(), &zero_features(16)).unwrap();
                let b = apply_mask(&img, &cor, &MaskSpec::new(strategy, hi, 0).unwrap(), &zero_features(16)).unwrap();
                let n = if strategy == Strategy::Pixel { 256 } else { 16 };
                prop_assert_eq!(a.mask.masked_count(), mask_count(lo, n));
                let (sa, sb) = (masked_set(&a.mask), masked_set(&b.mask));
                prop_assert!(sa.iter().all(|i| sb.contains(i)));
            }
        }

        #[test]
        fn soft_never_brightens(scores in prop::collection::vec(0.0f64..3.0, 4), vals in prop::collection::vec(0.0f64..=1.0, 16), r in 0.0f64..0.5) {
            let mut vals = vals;
            vals[5] = 0.0;
            let img = GridImage::new(4, 4, 2, vals).unwrap();
            let cor = CorrelationMap::new(scores).unwrap();
            let view = apply_mask(&img, &cor, &MaskSpec::new(Strategy::Soft, r, 0).unwrap(), &zero_features(4)).unwrap();
            let out = view.image().unwrap();
            for (o, i) in out.values().iter().zip(img.values()) {
                prop_assert!(*o <= *i && *o >= 0.0);
            }
            prop_assert_eq!(out.values()[5], 0.0);
        }
    }
}
