//! Grounding evidence for the round-best image and its text serialization.
//!
//! The serialized block is line oriented and bit-exact:
//!
//! ```text
//! detected_caption: <caption>
//! image_size: (<w>, <h>)
//! Region Label: <label>
//! Bounding Box: [<x_min>, <y_min>, <x_max>, <y_max>]
//! Average Depth: <d>
//! ```
//!
//! with the last three lines repeated per region. Lines are joined by `\n`
//! with no trailing newline.

use crate::backend::{GroundingResponse, GroundingTool, RawRegion};
use crate::model::{GroundingEvidence, Region};

pub const MAX_REGIONS: usize = 32;

const CAPTION_KEY: &str = "detected_caption: ";
const SIZE_KEY: &str = "image_size: ";
const LABEL_KEY: &str = "Region Label: ";
const BBOX_KEY: &str = "Bounding Box: ";
const DEPTH_KEY: &str = "Average Depth: ";

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingAcquisition {
    pub evidence: Option<GroundingEvidence>,
    pub notes: Vec<String>,
}

impl GroundingAcquisition {
    fn absent(note: impl Into<String>) -> Self {
        Self { evidence: None, notes: vec![note.into()] }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Rounds half up and checks the 0..=255 range.
fn depth_value(d: f64) -> Option<u8> {
    if !d.is_finite() {
        return None;
    }
    let r = (d + 0.5).floor();
    (0.0..=255.0).contains(&r).then_some(r as u8)
}

fn validate_region(raw: &RawRegion, width: u32, height: u32) -> Result<Region, String> {
    let label = single_line(&raw.label);
    if label.is_empty() {
        return Err("region with empty label".to_string());
    }
    let mean_depth = depth_value(raw.mean_depth)
        .ok_or_else(|| format!("region {label:?} depth {} outside 0-255", raw.mean_depth))?;
    let mut bbox = [0u32; 4];
    for (dst, &v) in bbox.iter_mut().zip(&raw.bbox) {
        *dst = u32::try_from(v).map_err(|_| format!("region {label:?} has negative coordinate {v}"))?;
    }
    let region = Region { label, bbox, mean_depth };
    if !region.fits(width, height) {
        return Err(format!(
            "region {:?} bbox {:?} does not fit a {width}x{height} image",
            region.label, region.bbox
        ));
    }
    Ok(region)
}

/// Validates a tool response into evidence. Bad regions are dropped with a
/// note; regions are ordered by area (largest first) and capped.
pub fn normalize_response(resp: &GroundingResponse) -> GroundingAcquisition {
    let caption = single_line(&resp.caption);
    if caption.is_empty() {
        return GroundingAcquisition::absent("grounding caption empty; ungrounded");
    }
    if resp.width == 0 || resp.height == 0 {
        return GroundingAcquisition::absent("grounding reported zero image size; ungrounded");
    }
    let mut notes = Vec::new();
    let mut regions: Vec<Region> = resp
        .regions
        .iter()
        .filter_map(|raw| match validate_region(raw, resp.width, resp.height) {
            Ok(r) => Some(r),
            Err(note) => {
                notes.push(format!("rejected {note}"));
                None
            }
        })
        .collect();
    regions.sort_by_key(|r| std::cmp::Reverse(r.area()));
    if regions.len() > MAX_REGIONS {
        notes.push(format!("kept {MAX_REGIONS} of {} regions", regions.len()));
        regions.truncate(MAX_REGIONS);
    }
    GroundingAcquisition {
        evidence: Some(GroundingEvidence {
            caption,
            regions,
            image_width: resp.width,
            image_height: resp.height,
        }),
        notes,
    }
}

/// Calls the grounding tool unless disabled. Failures degrade to absent
/// evidence.
pub fn acquire_grounding(
    tool: &dyn GroundingTool,
    image: &[u8],
    enabled: bool,
) -> GroundingAcquisition {
    if !enabled {
        return GroundingAcquisition::absent("grounding tools disabled; ungrounded");
    }
    match tool.ground(image) {
        Ok(resp) => normalize_response(&resp),
        Err(e) => GroundingAcquisition::absent(format!("grounding failed ({e}); ungrounded")),
    }
}

pub fn serialize_evidence(e: &GroundingEvidence) -> String {
    let mut lines = Vec::with_capacity(2 + 3 * e.regions.len());
    lines.push(format!("{CAPTION_KEY}{}", e.caption));
    lines.push(format!("{SIZE_KEY}({}, {})", e.image_width, e.image_height));
    for r in &e.regions {
        let [x0, y0, x1, y1] = r.bbox;
        lines.push(format!("{LABEL_KEY}{}", r.label));
        lines.push(format!("{BBOX_KEY}[{x0}, {y0}, {x1}, {y1}]"));
        lines.push(format!("{DEPTH_KEY}{}", r.mean_depth));
    }
    lines.join("\n")
}

/// Whether `e` is in the domain `serialize_evidence` is injective over:
/// single-line trimmed caption and labels, regions that fit, at most
/// [`MAX_REGIONS`].
pub fn is_serializable(e: &GroundingEvidence) -> bool {
    let clean = |s: &str| !s.is_empty() && single_line(s) == s;
    clean(&e.caption)
        && e.image_width > 0
        && e.image_height > 0
        && e.regions.len() <= MAX_REGIONS
        && e.regions.iter().all(|r| clean(&r.label) && r.fits(e.image_width, e.image_height))
}

fn parse_list<const N: usize>(s: &str, open: char, close: char) -> Result<[u32; N], String> {
    let inner = s
        .strip_prefix(open)
        .and_then(|s| s.strip_suffix(close))
        .ok_or_else(|| format!("expected {open}...{close}, got {s:?}"))?;
    let nums: Vec<u32> = inner
        .split(", ")
        .map(|n| n.parse::<u32>().map_err(|e| format!("bad number {n:?}: {e}")))
        .collect::<Result<_, _>>()?;
    nums.try_into().map_err(|v: Vec<u32>| format!("expected {N} numbers, got {}", v.len()))
}

/// Parses a block produced by [`serialize_evidence`].
pub fn parse_evidence(text: &str) -> Result<GroundingEvidence, String> {
    let mut lines = text.split('\n');
    let mut field = |key: &str| -> Result<String, String> {
        let line = lines.next().ok_or_else(|| format!("missing {key:?} line"))?;
        line.strip_prefix(key)
            .map(str::to_string)
            .ok_or_else(|| format!("expected {key:?}, got {line:?}"))
    };
    let caption = field(CAPTION_KEY)?;
    let [w, h] = parse_list::<2>(&field(SIZE_KEY)?, '(', ')')?;
    let mut regions = Vec::new();
    loop {
        let label = match field(LABEL_KEY) {
            Ok(l) => l,
            Err(e) if e.starts_with("missing") => break,
            Err(e) => return Err(e),
        };
        let bbox = parse_list::<4>(&field(BBOX_KEY)?, '[', ']')?;
        let depth = field(DEPTH_KEY)?;
        let mean_depth = depth.parse::<u8>().map_err(|e| format!("bad depth {depth:?}: {e}"))?;
        regions.push(Region { label, bbox, mean_depth });
    }
    Ok(GroundingEvidence { caption, regions, image_width: w, image_height: h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendError;

    fn raw(label: &str, bbox: [i64; 4], depth: f64) -> RawRegion {
        RawRegion { label: label.to_string(), bbox, mean_depth: depth }
    }

    fn response(regions: Vec<RawRegion>) -> GroundingResponse {
        GroundingResponse { caption: "a street scene".into(), width: 512, height: 512, regions }
    }

    #[test]
    fn red_car_block() {
        let e = GroundingEvidence {
            caption: "a red car on a street".into(),
            regions: vec![Region { label: "a red car".into(), bbox: [40, 60, 200, 180], mean_depth: 112 }],
            image_width: 512,
            image_height: 512,
        };
        let text = serialize_evidence(&e);
        assert_eq!(
            text,
            "detected_caption: a red car on a street\nimage_size: (512, 512)\nRegion Label: a red car\nBounding Box: [40, 60, 200, 180]\nAverage Depth: 112"
        );
        assert_eq!(serialize_evidence(&e), text);
        assert_eq!(parse_evidence(&text).unwrap(), e);
    }

    #[test]
    fn zero_regions_is_two_lines() {
        let e = GroundingEvidence { caption: "empty".into(), regions: vec![], image_width: 8, image_height: 9 };
        assert_eq!(serialize_evidence(&e), "detected_caption: empty\nimage_size: (8, 9)");
        assert_eq!(parse_evidence(&serialize_evidence(&e)).unwrap(), e);
    }

    #[test]
    fn two_regions_pass_through() {
        let acq = normalize_response(&response(vec![
            raw("a bear", [0, 0, 10, 10], 30.0),
            raw("a clock", [0, 0, 100, 100], 200.0),
        ]));
        let e = acq.evidence.unwrap();
        assert!(acq.notes.is_empty());
        assert_eq!(e.regions.len(), 2);
        assert_eq!(e.regions[0].label, "a clock", "largest area first");
    }

    #[test]
    fn depth_256_region_is_dropped_with_note() {
        let acq = normalize_response(&response(vec![
            raw("ok", [0, 0, 5, 5], 255.4),
            raw("too deep", [0, 0, 5, 5], 256.0),
            raw("rounds up out of range", [0, 0, 5, 5], 255.5),
        ]));
        let e = acq.evidence.unwrap();
        assert_eq!(e.regions.len(), 1);
        assert_eq!(e.regions[0].mean_depth, 255);
        assert_eq!(acq.notes.len(), 2);
    }

    #[test]
    fn depth_rounds_half_up() {
        assert_eq!(depth_value(127.5), Some(128));
        assert_eq!(depth_value(127.49), Some(127));
        assert_eq!(depth_value(-0.4), Some(0));
        assert_eq!(depth_value(-0.6), None);
        assert_eq!(depth_value(f64::NAN), None);
    }

    #[test]
    fn out_of_image_bbox_is_dropped() {
        let acq = normalize_response(&response(vec![
            raw("wide", [0, 0, 513, 10], 1.0),
            raw("inverted", [10, 0, 5, 10], 1.0),
            raw("negative", [-1, 0, 5, 10], 1.0),
        ]));
        assert!(acq.evidence.unwrap().regions.is_empty());
        assert_eq!(acq.notes.len(), 3);
    }

    #[test]
    fn region_cap() {
        let many = (0..40).map(|i| raw(&format!("r{i}"), [0, 0, i + 1, 1], 0.0)).collect();
        let acq = normalize_response(&response(many));
        let e = acq.evidence.unwrap();
        assert_eq!(e.regions.len(), MAX_REGIONS);
        assert_eq!(e.regions[0].label, "r39");
    }

    struct Failing;
    impl GroundingTool for Failing {
        fn ground(&self, _: &[u8]) -> Result<GroundingResponse, BackendError> {
            Err(BackendError::Transport("down".into()))
        }
    }

    #[test]
    fn disabled_or_failing_tools_degrade_to_absent() {
        let acq = acquire_grounding(&Failing, b"", false);
        assert!(acq.evidence.is_none());
        assert!(acq.notes[0].contains("ungrounded"));
        let acq = acquire_grounding(&Failing, b"", true);
        assert!(acq.evidence.is_none());
        assert!(acq.notes[0].contains("down"));
    }

    #[test]
    fn multiline_labels_are_flattened() {
        let acq = normalize_response(&response(vec![raw("a red\ncar ", [0, 0, 1, 1], 0.0)]));
        let e = acq.evidence.unwrap();
        assert_eq!(e.regions[0].label, "a red car");
        assert!(is_serializable(&e));
    }
}
