//! Synthetic vision-language testbed.
//!
//! Scenes are grayscale grids of square patches. Each object word owns a
//! small set of pixel positions inside a tile (supports are disjoint across
//! objects, so object prototypes are mutually orthogonal). Background tiles
//! carry a fixed texture on the remaining positions; an object tile shows the
//! object's pattern and occludes the texture. All tiles get uniform noise.
//!
//! The stand-in LVLM answers presence queries from a mix of a local score
//! (best-matching patch) and a global score (mean over patches plus a
//! co-occurrence prior pulled from associated objects). The mixing weight
//! `gamma` is the attention-deficiency knob: with large `gamma` an absent
//! object whose partner is visible scores above threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoding::LogitSource;
use crate::error::{contract, input, Result};
use crate::masking::GridImage;
use crate::matching::{AttentionHead, MatchingModel};
use crate::numeric::{dot, random_orthogonal, Matrix, SeededRng, Vector};
use crate::TokenId;

pub const YES: &str = "yes";
pub const NO: &str = "no";
pub const EOS: &str = "<eos>";
pub const FILLERS: [&str; 6] = ["is", "there", "a", "describe", "the", "image"];
pub const CAPTION_PROMPT: &str = "describe the image";

/// The checked-in testbed constants.
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../config/testbed.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    /// Attention sharpness per head; `W_T(h) · W_V(h)ᵀ = sharpness[h] · I`.
    pub sharpness: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvlmConfig {
    pub gamma: f64,
    pub cooccurrence_gain: f64,
    pub sharpness: f64,
    pub threshold: f64,
    pub generation_threshold: f64,
    pub filler_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub world_seed: u64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub patch_size: usize,
    pub objects: Vec<String>,
    /// Co-occurrence pairs; association is symmetric with unit strength.
    pub pairs: Vec<(String, String)>,
    pub pattern_pixels: usize,
    pub pattern_value: f64,
    pub texture_value: f64,
    pub noise_amplitude: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Scene sampling weight of the k-th object is `popularity_decay^k`.
    pub popularity_decay: f64,
    pub matching: MatchingConfig,
    pub lvlm: LvlmConfig,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG_JSON).expect("bundled testbed config parses")
    }
}

/// Output vocabulary with dense ids: objects, then `yes`, `no`, `<eos>`, then
/// the prompt filler words.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    words: Vec<String>,
    ids: BTreeMap<String, TokenId>,
    object_count: usize,
}

impl Lexicon {
    pub fn new(objects: &[String]) -> Result<Self> {
        let mut words: Vec<String> = objects.to_vec();
        words.extend([YES, NO, EOS].map(String::from));
        words.extend(FILLERS.map(String::from));
        let mut ids = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return input(format!("lexicon word {w:?} must be a single non-empty token"));
            }
            if ids.insert(w.clone(), i).is_some() {
                return input(format!("duplicate lexicon word {w:?}"));
            }
        }
        Ok(Self { words, ids, object_count: objects.len() })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn object_count(&self) -> usize {
        self.object_count
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id]
    }

    pub fn is_object(&self, id: TokenId) -> bool {
        id < self.object_count
    }

    pub fn objects(&self) -> &[String] {
        &self.words[..self.object_count]
    }

    pub fn yes(&self) -> TokenId {
        self.object_count
    }

    pub fn no(&self) -> TokenId {
        self.object_count + 1
    }

    pub fn eos(&self) -> TokenId {
        self.object_count + 2
    }

    pub fn filler(&self, word: &str) -> TokenId {
        self.ids[word]
    }

    /// Whitespace tokenization over the lexicon.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| crate::AglaError::Input(format!("unknown word {w:?}")))).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.words[i].clone()).collect()
    }
}

/// One object drawn on one or more patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub object: String,
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid_width: usize,
    pub grid_height: usize,
    pub placements: Vec<Placement>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn objects(&self) -> BTreeSet<String> {
        self.placements.iter().map(|p| p.object.clone()).collect()
    }
}

/// Linear patch featurizer `Y_j = A · flatten(tile_j)` plus the per-object
/// pixel patterns and their unit-norm prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    patch: usize,
    projection: Matrix,
    /// Pixel positions (within a tile) of each object's pattern.
    supports: Vec<Vec<usize>>,
    texture: Vec<usize>,
    pattern_value: f64,
    texture_value: f64,
    noise_amplitude: f64,
    prototypes: Vec<Vec<f64>>,
    texture_prototype: Vec<f64>,
    brightness: Vec<f64>,
}

impl Featurizer {
    pub fn new(cfg: &TestbedConfig) -> Result<Self> {
        let p2 = cfg.patch_size * cfg.patch_size;
        let n_obj = cfg.objects.len();
        if cfg.pattern_pixels == 0 || n_obj * cfg.pattern_pixels >= p2 {
            return contract(format!(
                "{n_obj} objects x {} pattern pixels do not fit a {p2}-pixel tile with texture left over",
                cfg.pattern_pixels
            ));
        }
        if !(0.0..=1.0).contains(&cfg.pattern_value) || cfg.noise_amplitude < 0.0 || cfg.texture_value < 0.0 {
            return contract("pattern value, texture value and noise amplitude out of range");
        }
        let mut rng = SeededRng::with_stream(cfg.world_seed, 0);
        let mut positions: Vec<usize> = (0..p2).collect();
        rand::seq::SliceRandom::shuffle(positions.as_mut_slice(), &mut rng);
        let supports: Vec<Vec<usize>> = (0..n_obj)
            .map(|k| {
                let mut s = positions[k * cfg.pattern_pixels..(k + 1) * cfg.pattern_pixels].to_vec();
                s.sort_unstable();
                s
            })
            .collect();
        let mut texture = positions[n_obj * cfg.pattern_pixels..].to_vec();
        texture.sort_unstable();
        let projection = random_orthogonal(p2, &mut rng);

        let project_unit = |pixels: &[usize], value: f64| -> Result<Vec<f64>> {
            let mut flat = vec![0.0; p2];
            pixels.iter().for_each(|&p| flat[p] = value);
            let v = projection.mul_vec(&flat)?;
            let norm = dot(&v, &v).sqrt();
            Ok(v.into_iter().map(|x| x / norm).collect())
        };
        let prototypes = supports.iter().map(|s| project_unit(s, cfg.pattern_value)).collect::<Result<Vec<_>>>()?;
        let texture_prototype = project_unit(&texture, 1.0)?;
        let all: Vec<usize> = (0..p2).collect();
        let brightness = project_unit(&all, 1.0)?;
        Ok(Self {
            patch: cfg.patch_size,
            projection,
            supports,
            texture,
            pattern_value: cfg.pattern_value,
            texture_value: cfg.texture_value,
            noise_amplitude: cfg.noise_amplitude,
            prototypes,
            texture_prototype,
            brightness,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Unit-norm prototype `e_o` of object index `o`.
    pub fn prototype(&self, o: usize) -> &[f64] {
        &self.prototypes[o]
    }

    pub fn texture_prototype(&self) -> &[f64] {
        &self.texture_prototype
    }

    /// Unit direction measuring total tile intensity.
    pub fn brightness_direction(&self) -> &[f64] {
        &self.brightness
    }

    pub fn support(&self, o: usize) -> &[usize] {
        &self.supports[o]
    }

    pub fn featurize(&self, image: &GridImage) -> Result<Matrix> {
        if image.patch_size() != self.patch {
            return contract(format!("image patch size {} but featurizer expects {}", image.patch_size(), self.patch));
        }
        let k = image.patch_count();
        let mut data = Vec::with_capacity(k * self.feature_dim());
        for j in 0..k {
            data.extend(self.projection.mul_vec(&image.tile(j))?);
        }
        Matrix::new(k, self.feature_dim(), data)
    }
}

/// Symmetric co-occurrence table between object indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cooccurrence {
    assoc: Vec<Vec<(usize, f64)>>,
}

impl Cooccurrence {
    pub fn from_pairs(lexicon: &Lexicon, pairs: &[(String, String)]) -> Result<Self> {
        let mut assoc = vec![Vec::new(); lexicon.object_count()];
        for (a, b) in pairs {
            let ia = object_index(lexicon, a)?;
            let ib = object_index(lexicon, b)?;
            if ia == ib {
                return input(format!("object {a:?} cannot be associated with itself"));
            }
            assoc[ia].push((ib, 1.0));
            assoc[ib].push((ia, 1.0));
        }
        Ok(Self { assoc })
    }

    pub fn associated(&self, o: usize) -> &[(usize, f64)] {
        &self.assoc[o]
    }

    pub fn are_associated(&self, a: usize, b: usize) -> bool {
        self.assoc[a].iter().any(|(x, _)| *x == b)
    }
}

fn object_index(lexicon: &Lexicon, word: &str) -> Result<usize> {
    match lexicon.id(word) {
        Some(id) if lexicon.is_object(id) => Ok(id),
        _ => input(format!("{word:?} is not an object word")),
    }
}

/// Parsed form of the two prompt shapes the toy LVLM understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    /// `is there a <object>`
    Presence(usize),
    /// `describe the image`
    Caption,
}

/// Score decomposition for one object on one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectScore {
    pub local: f64,
    pub global: f64,
    pub score: f64,
}

/// The stand-in LVLM whose logits feed the decoder.
#[derive(Debug, Clone)]
pub struct ToyLvlm {
    lexicon: Lexicon,
    prototypes: Vec<Vec<f64>>,
    cooccurrence: Cooccurrence,
    cfg: LvlmConfig,
}

impl ToyLvlm {
    pub fn new(lexicon: Lexicon, featurizer: &Featurizer, cooccurrence: Cooccurrence, cfg: LvlmConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.gamma) {
            return contract(format!("deficiency gamma {} outside [0, 1]", cfg.gamma));
        }
        if cfg.sharpness <= 0.0 || cfg.cooccurrence_gain < 0.0 {
            return contract("sharpness must be positive and co-occurrence gain nonnegative");
        }
        let prototypes = (0..lexicon.object_count()).map(|o| featurizer.prototype(o).to_vec()).collect();
        Ok(Self { lexicon, prototypes, cooccurrence, cfg })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn config(&self) -> &LvlmConfig {
        &self.cfg
    }

    pub fn parse_prompt(&self, prompt: &[TokenId]) -> Result<PromptKind> {
        let lx = &self.lexicon;
        let words: Vec<&str> = prompt.iter().map(|&t| lx.word(t)).collect();
        match words[..] {
            ["is", "there", "a", obj] => Ok(PromptKind::Presence(object_index(lx, obj)?)),
            ["describe", "the", "image"] => Ok(PromptKind::Caption),
            _ => input(format!("unsupported prompt {:?}", words.join(" "))),
        }
    }

    fn best_match(&self, o: usize, y: &Matrix) -> f64 {
        (0..y.rows()).map(|j| dot(&self.prototypes[o], y.row(j))).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn object_score(&self, o: usize, y: &Matrix) -> ObjectScore {
        let k = y.rows() as f64;
        let local = self.best_match(o, y);
        let mean = (0..y.rows()).map(|j| dot(&self.prototypes[o], y.row(j))).sum::<f64>() / k;
        let prior: f64 = self.cooccurrence.associated(o).iter().map(|&(other, w)| w * self.best_match(other, y)).sum();
        let global = mean + self.cfg.cooccurrence_gain * prior;
        let g = self.cfg.gamma;
        ObjectScore { local, global, score: g * global + (1.0 - g) * local }
    }

    fn check_view(&self, y: &Matrix) -> Result<()> {
        if y.rows() == 0 || self.prototypes.first().is_some_and(|p| p.len() != y.cols()) {
            return contract(format!("view features are {}x{}, expected K x {}", y.rows(), y.cols(), self.prototypes[0].len()));
        }
        Ok(())
    }

    pub fn logits(&self, y: &Matrix, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vector> {
        self.check_view(y)?;
        let lx = &self.lexicon;
        let c = &self.cfg;
        let mut logits = vec![c.filler_floor; lx.len()];
        match self.parse_prompt(prompt)? {
            PromptKind::Presence(o) => {
                let yes = c.sharpness * (self.object_score(o, y).score - c.threshold);
                logits[lx.yes()] = yes;
                logits[lx.no()] = -yes;
            }
            PromptKind::Caption => {
                let emitted: BTreeSet<TokenId> = prefix.iter().copied().collect();
                let mut best_remaining: Option<f64> = None;
                for o in (0..lx.object_count()).filter(|o| !emitted.contains(o)) {
                    let s = self.object_score(o, y).score;
                    logits[o] = c.sharpness * (s - c.generation_threshold);
                    best_remaining = Some(best_remaining.map_or(s, |b: f64| b.max(s)));
                }
                logits[lx.eos()] = c.sharpness * (c.generation_threshold - best_remaining.unwrap_or(0.0));
            }
        }
        Vector::new(logits)
    }
}

impl LogitSource for ToyLvlm {
    type View = Matrix;

    fn vocab_size(&self) -> usize {
        self.lexicon.len()
    }

    fn eos(&self) -> TokenId {
        self.lexicon.eos()
    }

    fn next_logits(&self, view: &Matrix, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vector> {
        self.logits(view, prompt, prefix)
    }
}

/// Everything built from one [`TestbedConfig`]: vocabulary, featurizer,
/// co-occurrence table, matching model and LVLM parameters.
#[derive(Debug, Clone)]
pub struct Testbed {
    cfg: TestbedConfig,
    lexicon: Lexicon,
    featurizer: Featurizer,
    cooccurrence: Cooccurrence,
    matching: MatchingModel,
}

impl Testbed {
    pub fn new(cfg: TestbedConfig) -> Result<Self> {
        if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
            return contract("objects per scene must satisfy 1 <= min <= max");
        }
        if cfg.max_objects > cfg.grid_width * cfg.grid_height {
            return contract("more objects than patches");
        }
        let lexicon = Lexicon::new(&cfg.objects)?;
        let featurizer = Featurizer::new(&cfg)?;
        let cooccurrence = Cooccurrence::from_pairs(&lexicon, &cfg.pairs)?;
        let matching = build_matching_model(&cfg, &lexicon, &featurizer)?;
        Ok(Self { cfg, lexicon, featurizer, cooccurrence, matching })
    }

    pub fn config(&self) -> &TestbedConfig {
        &self.cfg
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn cooccurrence(&self) -> &Cooccurrence {
        &self.cooccurrence
    }

    pub fn matching_model(&self) -> &MatchingModel {
        &self.matching
    }

    pub fn patch_count(&self) -> usize {
        self.cfg.grid_width * self.cfg.grid_height
    }

    /// LVLM with the configured constants.
    pub fn lvlm(&self) -> Result<ToyLvlm> {
        self.lvlm_with_gamma(self.cfg.lvlm.gamma)
    }

    pub fn lvlm_with_gamma(&self, gamma: f64) -> Result<ToyLvlm> {
        let cfg = LvlmConfig { gamma, ..self.cfg.lvlm.clone() };
        ToyLvlm::new(self.lexicon.clone(), &self.featurizer, self.cooccurrence.clone(), cfg)
    }

    pub fn object_index(&self, word: &str) -> Result<usize> {
        object_index(&self.lexicon, word)
    }

    pub fn render_scene(&self, spec: &SceneSpec) -> Result<(GridImage, BTreeSet<String>)> {
        render_scene(spec, self)
    }

    pub fn featurize(&self, image: &GridImage) -> Result<Matrix> {
        self.featurizer.featurize(image)
    }

    /// Scene with the given objects on the given patches.
    pub fn scene(&self, placements: &[(&str, usize)], seed: u64) -> SceneSpec {
        SceneSpec {
            grid_width: self.cfg.grid_width,
            grid_height: self.cfg.grid_height,
            placements: placements.iter().map(|(o, j)| Placement { object: o.to_string(), patches: vec![*j] }).collect(),
            seed,
        }
    }
}

fn build_matching_model(cfg: &TestbedConfig, lexicon: &Lexicon, featurizer: &Featurizer) -> Result<MatchingModel> {
    let d = featurizer.feature_dim();
    let mut emb = Matrix::zeros(lexicon.len(), d);
    for o in 0..lexicon.object_count() {
        emb.row_mut(o).copy_from_slice(featurizer.prototype(o));
    }
    for w in FILLERS {
        emb.row_mut(lexicon.filler(w)).copy_from_slice(featurizer.texture_prototype());
    }
    if cfg.matching.sharpness.is_empty() {
        return contract("matching model needs at least one head sharpness");
    }
    let mut rng = SeededRng::with_stream(cfg.world_seed, 1);
    let heads = cfg
        .matching
        .sharpness
        .iter()
        .map(|&s| {
            let q = random_orthogonal(d, &mut rng);
            AttentionHead { w_t: q.scale(s), w_v: q }
        })
        .collect();
    MatchingModel::new(emb, heads, featurizer.brightness_direction().to_vec(), cfg.matching.bias)
}

/// Draws a scene: object tiles show the pattern at `pattern_value` and noise
/// elsewhere; background tiles show texture plus noise.
pub fn render_scene(spec: &SceneSpec, testbed: &Testbed) -> Result<(GridImage, BTreeSet<String>)> {
    let cfg = &testbed.cfg;
    if spec.grid_width != cfg.grid_width || spec.grid_height != cfg.grid_height {
        return contract(format!(
            "scene grid {}x{} does not match testbed {}x{}",
            spec.grid_width, spec.grid_height, cfg.grid_width, cfg.grid_height
        ));
    }
    let k = spec.grid_width * spec.grid_height;
    let mut owner: Vec<Option<usize>> = vec![None; k];
    for pl in &spec.placements {
        let o = testbed.object_index(&pl.object)?;
        if pl.patches.is_empty() {
            return input(format!("object {:?} has no patches", pl.object));
        }
        for &j in &pl.patches {
            if j >= k {
                return input(format!("patch {j} outside a {k}-patch grid"));
            }
            if owner[j].replace(o).is_some() {
                return input(format!("patch {j} is claimed by more than one placement"));
            }
        }
    }
    let f = &testbed.featurizer;
    let p = cfg.patch_size;
    let width = cfg.grid_width * p;
    let mut values = vec![0.0; width * cfg.grid_height * p];
    let mut rng = SeededRng::with_stream(spec.seed, 0);
    for (j, own) in owner.iter().enumerate() {
        let mut tile: Vec<f64> = (0..p * p).map(|_| rng.uniform(0.0, f.noise_amplitude)).collect();
        match own {
            Some(o) => f.supports[*o].iter().for_each(|&q| tile[q] = f.pattern_value),
            None => f.texture.iter().for_each(|&q| tile[q] += f.texture_value),
        }
        let (x0, y0) = ((j % cfg.grid_width) * p, (j / cfg.grid_width) * p);
        for (q, v) in tile.into_iter().enumerate() {
            values[(y0 + q / p) * width + x0 + q % p] = v.clamp(0.0, 1.0);
        }
    }
    let image = GridImage::new(width, cfg.grid_height * p, p, values)?;
    Ok((image, spec.objects()))
}

/// Kind of synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchmarkKind {
    #[serde(rename = "pope-random")]
    PopeRandom,
    #[serde(rename = "pope-popular")]
    PopePopular,
    #[serde(rename = "pope-adversarial")]
    PopeAdversarial,
    #[serde(rename = "caption")]
    Caption,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 4] =
        [BenchmarkKind::PopeRandom, BenchmarkKind::PopePopular, BenchmarkKind::PopeAdversarial, BenchmarkKind::Caption];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkKind::PopeRandom => "pope-random",
            BenchmarkKind::PopePopular => "pope-popular",
            BenchmarkKind::PopeAdversarial => "pope-adversarial",
            BenchmarkKind::Caption => "caption",
        }
    }

    pub fn is_pope(self) -> bool {
        self != BenchmarkKind::Caption
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkKind {
    type Err = crate::AglaError;

    fn from_str(s: &str) -> Result<Self> {
        BenchmarkKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| crate::AglaError::Input(format!("unknown benchmark kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => YES,
            Answer::No => NO,
        }
    }
}

/// Either a path to a PGM file or the scene itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Inline(SceneSpec),
}

/// One benchmark line. POPE records carry `label`, caption records carry
/// the ground-truth `objects`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub image: ImageRef,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
}

impl Record {
    pub fn scene(&self) -> Result<&SceneSpec> {
        match &self.image {
            ImageRef::Inline(s) => Ok(s),
            ImageRef::Path(p) => input(format!("record {} references external image {p:?}", self.id)),
        }
    }
}

/// Per-record seed: `base ⊕ index`.
pub fn record_seed(base: u64, index: usize) -> u64 {
    base ^ index as u64
}

fn sample_scene(testbed: &Testbed, seed: u64) -> SceneSpec {
    let cfg = &testbed.cfg;
    let mut rng = SeededRng::with_stream(seed, 0);
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let n_obj = testbed.lexicon.object_count();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..count {
        // at most one object from each co-occurrence group
        let candidates: Vec<usize> =
            (0..n_obj).filter(|o| !chosen.contains(o) && !chosen.iter().any(|c| testbed.cooccurrence.are_associated(*c, *o))).collect();
        if candidates.is_empty() {
            break;
        }
        let weights: Vec<f64> = candidates.iter().map(|&o| cfg.popularity_decay.powi(o as i32)).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.next_f64() * total;
        let mut pick = *candidates.last().expect("non-empty");
        for (&o, w) in candidates.iter().zip(&weights) {
            if u < *w {
                pick = o;
                break;
            }
            u -= w;
        }
        chosen.push(pick);
    }
    let k = cfg.grid_width * cfg.grid_height;
    let patches = rand::seq::index::sample(&mut rng, k, chosen.len()).into_vec();
    SceneSpec {
        grid_width: cfg.grid_width,
        grid_height: cfg.grid_height,
        placements: chosen
            .iter()
            .zip(patches)
            .map(|(&o, j)| Placement { object: testbed.lexicon.word(o).to_string(), patches: vec![j] })
            .collect(),
        seed: rand::RngCore::next_u64(&mut rng),
    }
}

/// Generates `n` records. POPE kinds alternate yes/no labels starting with
/// yes (so `n` even is exactly balanced). Negatives query an absent object:
/// uniformly (random), the most frequent absent object over the whole
/// benchmark (popular), or an absent object associated with a present one
/// (adversarial).
pub fn generate_benchmark(testbed: &Testbed, kind: BenchmarkKind, n: usize, seed: u64) -> Result<Vec<Record>> {
    if n == 0 {
        return contract("benchmark size must be at least 1");
    }
    let scenes: Vec<SceneSpec> = (0..n).map(|i| sample_scene(testbed, record_seed(seed, i))).collect();
    let lx = &testbed.lexicon;
    let n_obj = lx.object_count();

    let mut frequency = vec![0usize; n_obj];
    for s in &scenes {
        for pl in &s.placements {
            frequency[testbed.object_index(&pl.object)?] += 1;
        }
    }
    let mut by_popularity: Vec<usize> = (0..n_obj).collect();
    by_popularity.sort_by(|a, b| frequency[*b].cmp(&frequency[*a]).then(a.cmp(b)));

    let mut records = Vec::with_capacity(n);
    for (i, scene) in scenes.into_iter().enumerate() {
        let present: Vec<usize> = scene.placements.iter().map(|p| testbed.object_index(&p.object)).collect::<Result<_>>()?;
        let gt: Vec<String> = scene.objects().into_iter().collect();
        let mut rng = SeededRng::with_stream(record_seed(seed, i), 1);
        let (prompt, label, objects) = if kind == BenchmarkKind::Caption {
            (CAPTION_PROMPT.to_string(), None, Some(gt))
        } else {
            let positive = i % 2 == 0;
            let query = if positive {
                present[rng.below(present.len())]
            } else {
                let absent: Vec<usize> = (0..n_obj).filter(|o| !present.contains(o)).collect();
                match kind {
                    BenchmarkKind::PopeRandom => absent[rng.below(absent.len())],
                    BenchmarkKind::PopePopular => *by_popularity.iter().find(|o| absent.contains(o)).expect("some object absent"),
                    BenchmarkKind::PopeAdversarial => {
                        let related: Vec<usize> = absent
                            .iter()
                            .copied()
                            .filter(|&o| present.iter().any(|&p| testbed.cooccurrence.are_associated(p, o)))
                            .collect();
                        let pool = if related.is_empty() { &absent } else { &related };
                        pool[rng.below(pool.len())]
                    }
                    BenchmarkKind::Caption => unreachable!(),
                }
            };
            let label = if positive { Answer::Yes } else { Answer::No };
            (format!("is there a {}", lx.word(query)), Some(label), None)
        };
        records.push(Record { id: i, image: ImageRef::Inline(scene), prompt, label, objects });
    }
    Ok(records)
}

pub fn records_to_jsonl(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Into::into)).collect()
}
