//! Hidden requirement-vector world. An "image" is a bit vector of satisfied
//! requirements carried in a tEXt chunk of a real PNG, so the engine still
//! sees opaque PNG bytes.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, EditRequest, Editor, GenerateRequest, Generator, GroundingResponse,
    GroundingTool, RawRegion, Scorer,
};
use crate::hashing::{hash_bytes, hash_words, unit_f64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Number of hidden atomic requirements.
    pub m: usize,
    pub p_resample: f64,
    pub p_rewrite: f64,
    pub p_edit_target: f64,
    pub p_edit_side: f64,
    pub analyzer_recall: f64,
    pub verifier_flip: f64,
    pub world_seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            m: 6,
            p_resample: 0.5,
            p_rewrite: 0.6,
            p_edit_target: 0.8,
            p_edit_side: 0.05,
            analyzer_recall: 1.0,
            verifier_flip: 0.0,
            world_seed: 0,
        }
    }
}

/// Upper bound on `m`; keeps simulated PNGs small.
pub const MAX_REQUIREMENTS: usize = 4096;

impl WorldSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.m == 0 || self.m > MAX_REQUIREMENTS {
            return Err(format!("m must lie in 1..={MAX_REQUIREMENTS}, got {}", self.m));
        }
        let probs = [
            ("p_resample", self.p_resample),
            ("p_rewrite", self.p_rewrite),
            ("p_edit_target", self.p_edit_target),
            ("p_edit_side", self.p_edit_side),
            ("analyzer_recall", self.analyzer_recall),
            ("verifier_flip", self.verifier_flip),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    /// Requirements the scripted analyzer surfaces: the first ⌈recall·m⌉,
    /// at least one.
    pub fn surfaced(&self) -> usize {
        ((self.analyzer_recall * self.m as f64).ceil() as usize).clamp(1, self.m)
    }

    pub(crate) fn draw(&self, tag: Tag, key: u64, k: usize) -> f64 {
        unit_f64(hash_words(&[self.world_seed, tag.word(), key, k as u64]))
    }
}

/// Independent random streams of the world.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Tag {
    Generate,
    EditTarget,
    EditSide,
    VerifierFlip,
}

impl Tag {
    fn word(self) -> u64 {
        let name: &[u8] = match self {
            Tag::Generate => b"generate",
            Tag::EditTarget => b"edit_target",
            Tag::EditSide => b"edit_side",
            Tag::VerifierFlip => b"verifier_flip",
        };
        hash_bytes(name)
    }
}

/// 1-based requirement label used in every scripted text.
pub fn requirement_label(k: usize) -> String {
    format!("req-{k}")
}

/// Every third requirement (k ≡ 2 mod 3) is minor. The wording makes the
/// keyword classifier agree.
pub fn is_major_requirement(k: usize) -> bool {
    k % 3 != 2
}

pub fn requirement_text(k: usize) -> String {
    if is_major_requirement(k) {
        format!("{}: object {k} is present", requirement_label(k))
    } else {
        format!("{}: lighting and mood variant {k}", requirement_label(k))
    }
}

pub fn question_text(k: usize) -> String {
    format!("Is {} satisfied?", requirement_label(k))
}

/// All `req-N` indices mentioned in `text`, in order of appearance.
pub fn parse_requirement_indices(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find("req-") {
        rest = &rest[pos + 4..];
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if let Ok(k) = digits.parse::<usize>() {
            out.push(k);
        }
    }
    out
}

const TEXT_KEY: &str = "raise-sim-bits";
const EDGE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SimImage {
    pub bits: Vec<bool>,
}

impl SimImage {
    pub fn zeros(m: usize) -> Self {
        Self { bits: vec![false; m] }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn all_set(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    /// Bit for 1-based requirement `k`.
    pub fn satisfies(&self, k: usize) -> bool {
        k >= 1 && self.bits.get(k - 1).copied().unwrap_or(false)
    }

    fn bit_string(&self) -> String {
        self.bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
    }

    /// Square edge; every unit region [k, k, k+1, k+1] fits.
    pub fn edge(&self) -> u32 {
        EDGE.max(self.bits.len() as u32 + 1)
    }

    /// Grayscale PNG; column k is white when bit k is set, for eyeballing.
    pub fn encode_png(&self) -> Vec<u8> {
        let (w, h) = (self.edge(), self.edge());
        let row: Vec<u8> = (0..w as usize)
            .map(|x| if self.bits.get(x).copied().unwrap_or(false) { 255 } else { 24 })
            .collect();
        let pixels = row.repeat(h as usize);
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(TEXT_KEY.to_string(), self.bit_string())
            .expect("ascii keyword and text");
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&pixels).expect("in-memory png data");
        writer.finish().expect("in-memory png finish");
        out
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, String> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let reader = decoder.read_info().map_err(|e| format!("not a sim image: {e}"))?;
        let chunk = reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .find(|c| c.keyword == TEXT_KEY)
            .ok_or("png has no sim bit chunk")?;
        let bits = chunk
            .text
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(format!("bad bit character {other:?}")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if bits.is_empty() {
            return Err("sim image has no bits".into());
        }
        Ok(Self { bits })
    }
}

/// Each bit set independently with `p`. Draws depend only on the seed, so
/// resample and rewrite share random numbers (common random numbers).
pub fn sim_generate_with(p: f64, seed: u64, world: &WorldSpec) -> SimImage {
    SimImage { bits: (0..world.m).map(|k| world.draw(Tag::Generate, seed, k) < p).collect() }
}

pub fn sim_generate(prompt: &str, user_prompt: &str, seed: u64, world: &WorldSpec) -> SimImage {
    let p = if prompt == user_prompt { world.p_resample } else { world.p_rewrite };
    sim_generate_with(p, seed, world)
}

/// Applies the edit encoded in `instruction` to `reference`.
pub fn sim_edit(instruction: &str, seed: u64, reference: &SimImage, world: &WorldSpec) -> Result<SimImage, String> {
    let targets = parse_requirement_indices(instruction);
    if targets.is_empty() {
        return Err(format!("edit instruction names no requirement: {instruction:?}"));
    }
    let m = reference.bits.len();
    if let Some(bad) = targets.iter().find(|&&k| k == 0 || k > m) {
        return Err(format!("edit targets req-{bad} outside 1..={m}"));
    }
    let bits = (0..m)
        .map(|i| {
            if targets.contains(&(i + 1)) {
                reference.bits[i] || world.draw(Tag::EditTarget, seed, i) < world.p_edit_target
            } else {
                reference.bits[i] && world.draw(Tag::EditSide, seed, i) >= world.p_edit_side
            }
        })
        .collect();
    Ok(SimImage { bits })
}

pub fn sim_score(image: &SimImage) -> f64 {
    image.popcount() as f64 / image.bits.len() as f64
}

pub fn sim_ground(image: &SimImage) -> GroundingResponse {
    let regions = image
        .bits
        .iter()
        .enumerate()
        .filter(|(_, b)| **b)
        .map(|(i, _)| {
            let k = i as i64;
            RawRegion {
                label: format!("{} satisfied", requirement_label(i + 1)),
                bbox: [k, k, k + 1, k + 1],
                mean_depth: 128.0,
            }
        })
        .collect();
    GroundingResponse {
        caption: format!("simulated image with {} of {} requirements satisfied", image.popcount(), image.bits.len()),
        width: image.edge(),
        height: image.edge(),
        regions,
    }
}

fn decode(bytes: &[u8]) -> Result<SimImage, BackendError> {
    SimImage::decode_png(bytes).map_err(BackendError::Rejected)
}

pub struct SimGenerator {
    pub world: WorldSpec,
    pub user_prompt: String,
}

impl Generator for SimGenerator {
    fn generate(&self, req: &GenerateRequest) -> Result<Vec<u8>, BackendError> {
        Ok(sim_generate(&req.prompt, &self.user_prompt, req.seed, &self.world).encode_png())
    }
}

pub struct SimEditor {
    pub world: WorldSpec,
}

impl Editor for SimEditor {
    fn edit(&self, req: &EditRequest<'_>) -> Result<Vec<u8>, BackendError> {
        let reference = decode(req.reference)?;
        sim_edit(req.instruction, req.seed, &reference, &self.world)
            .map(|img| img.encode_png())
            .map_err(BackendError::Rejected)
    }
}

pub struct SimScorer;

impl Scorer for SimScorer {
    fn score(&self, image: &[u8], _prompt: &str) -> Result<f64, BackendError> {
        decode(image).map(|img| sim_score(&img))
    }
}

pub struct SimGrounding;

impl GroundingTool for SimGrounding {
    fn ground(&self, image: &[u8]) -> Result<GroundingResponse, BackendError> {
        decode(image).map(|img| sim_ground(&img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::classify_major;

    fn world() -> WorldSpec {
        WorldSpec::default()
    }

    #[test]
    fn png_round_trip() {
        let img = SimImage { bits: vec![true, false, true, true, false, false] };
        let bytes = img.encode_png();
        assert_eq!(crate::image::png_dimensions(&bytes).unwrap(), (64, 64));
        assert_eq!(SimImage::decode_png(&bytes).unwrap(), img);
        assert_eq!(img.encode_png(), bytes);
        assert!(SimImage::decode_png(b"junk").is_err());
    }

    #[test]
    fn degenerate_generation() {
        let w = WorldSpec { p_rewrite: 1.0, p_resample: 0.0, ..world() };
        assert!(sim_generate("rewritten", "user", 9, &w).all_set());
        assert_eq!(sim_generate("user", "user", 9, &w).popcount(), 0);
        assert_eq!(sim_generate("x", "user", 3, &world()), sim_generate("x", "user", 3, &world()));
    }

    #[test]
    fn degenerate_edits() {
        let reference = SimImage { bits: vec![true, false, true, false] };
        let w = WorldSpec { m: 4, p_edit_target: 1.0, p_edit_side: 0.0, ..world() };
        let out = sim_edit("fix req-2", 5, &reference, &w).unwrap();
        assert_eq!(out.bits, vec![true, true, true, false]);
        let w = WorldSpec { m: 4, p_edit_target: 1.0, p_edit_side: 1.0, ..world() };
        let out = sim_edit("fix req-2", 5, &reference, &w).unwrap();
        assert_eq!(out.bits, vec![false, true, false, false]);
        assert_eq!(sim_edit("fix req-2", 5, &reference, &w), sim_edit("fix req-2", 5, &reference, &w));
    }

    #[test]
    fn bad_edit_instructions_error() {
        let reference = SimImage::zeros(4);
        assert!(sim_edit("make it nicer", 1, &reference, &world()).is_err());
        assert!(sim_edit("fix req-9", 1, &reference, &world()).is_err());
        assert!(sim_edit("fix req-0", 1, &reference, &world()).is_err());
    }

    #[test]
    fn score_is_popcount_fraction() {
        assert_eq!(sim_score(&SimImage { bits: vec![true; 6] }), 1.0);
        assert_eq!(sim_score(&SimImage::zeros(6)), 0.0);
        assert_eq!(sim_score(&SimImage { bits: vec![true, true, true, false, false, false] }), 0.5);
    }

    #[test]
    fn requirement_wording_matches_classifier() {
        for k in 1..=30 {
            assert_eq!(classify_major(&requirement_text(k)), is_major_requirement(k), "req-{k}");
        }
    }

    #[test]
    fn index_parsing() {
        assert_eq!(parse_requirement_indices("fix req-3 and req-12, then req-"), vec![3, 12]);
        assert!(parse_requirement_indices("nothing").is_empty());
    }

    #[test]
    fn grounding_regions_fit() {
        let img = SimImage { bits: vec![true; 70] };
        let acq = crate::grounding::normalize_response(&sim_ground(&img));
        assert!(acq.notes.iter().all(|n| !n.starts_with("rejected")));
        assert_eq!(acq.evidence.unwrap().regions.len(), crate::grounding::MAX_REGIONS);
    }

    #[test]
    fn surfaced_counts() {
        assert_eq!(WorldSpec { analyzer_recall: 1.0, ..world() }.surfaced(), 6);
        assert_eq!(WorldSpec { analyzer_recall: 0.5, ..world() }.surfaced(), 3);
        assert_eq!(WorldSpec { analyzer_recall: 0.0, ..world() }.surfaced(), 1);
    }

    #[test]
    fn validation() {
        assert!(world().validate().is_ok());
        assert!(WorldSpec { m: 0, ..world() }.validate().is_err());
        assert!(WorldSpec { verifier_flip: 1.5, ..world() }.validate().is_err());
    }
}
