//! A small synthetic inspection world: rendered 32x32 scenes of a power
//! line with one attached object, their captions and detector boxes, seed
//! templates, caption pairs for alignment, and MCQ items whose answers are
//! stated in the captions.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::McqItem;
use crate::jsonl::write_jsonl;
use crate::model::image::ImageRaster;
use crate::pipeline::{CaptionRecord, Detection, DetectionRecord, SeedTemplate};
use crate::sequence::{make_single_turn, ConversationSample, SampleType, BRIEF_QUESTIONS};

pub const SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ObjectKind {
    Insulator,
    BirdNest,
    Kite,
    Damper,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [
        ObjectKind::Insulator,
        ObjectKind::BirdNest,
        ObjectKind::Kite,
        ObjectKind::Damper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Insulator => "insulator",
            ObjectKind::BirdNest => "bird nest",
            ObjectKind::Kite => "kite",
            ObjectKind::Damper => "damper",
        }
    }

    fn with_article(self) -> String {
        match self {
            ObjectKind::Insulator => "an insulator".into(),
            o => format!("a {}", o.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sky {
    Clear,
    Cloudy,
}

impl Sky {
    pub fn name(self) -> &'static str {
        match self {
            Sky::Clear => "clear",
            Sky::Cloudy => "cloudy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// One renderable scene. `variant` seeds pixel noise and a small shift of
/// the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Scene {
    pub object: ObjectKind,
    pub sky: Sky,
    pub side: Side,
    pub variant: u32,
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}-{}",
            self.object.name().replace(' ', "_"),
            self.sky.name(),
            self.side.name(),
            self.variant
        )
    }
}

const LINE_ROWS: std::ops::Range<usize> = 14..16;

/// Pixel rectangle `(x0, y0, x1, y1)`, exclusive on the far side.
type Rect = (usize, usize, usize, usize);

impl Scene {
    /// Every object/sky/side combination, `variants` times over.
    pub fn all(variants: u32) -> Vec<Scene> {
        let mut out = Vec::new();
        for variant in 0..variants {
            for object in ObjectKind::ALL {
                for sky in [Sky::Clear, Sky::Cloudy] {
                    for side in [Side::Left, Side::Right] {
                        out.push(Scene {
                            object,
                            sky,
                            side,
                            variant,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn file_name(&self) -> String {
        format!("{self}.ppm")
    }

    fn rng(&self) -> ChaCha8Rng {
        let key = (self.object as u64) << 48 | (self.sky as u64) << 40 | (self.side as u64) << 32 | self.variant as u64;
        ChaCha8Rng::seed_from_u64(key)
    }

    fn centre_x(&self) -> usize {
        let base: i64 = match self.side {
            Side::Left => 8,
            Side::Right => 24,
        };
        let shift = if self.variant == 0 {
            0
        } else {
            self.rng().random_range(-1..=1)
        };
        (base + shift) as usize
    }

    fn object_rect(&self) -> Rect {
        let cx = self.centre_x();
        match self.object {
            ObjectKind::Insulator => (cx - 2, 16, cx + 3, 29),
            ObjectKind::BirdNest => (cx - 6, 4, cx + 7, 14),
            ObjectKind::Kite => (cx - 6, 16, cx + 7, 29),
            ObjectKind::Damper => (cx - 5, 16, cx + 5, 21),
        }
    }

    pub fn render(&self) -> ImageRaster {
        let mut rng = self.rng();
        let sky = match self.sky {
            Sky::Clear => [110, 170, 230],
            Sky::Cloudy => [150, 150, 160],
        };
        let mut img = ImageRaster::filled(SIZE, SIZE, sky).expect("fixed size");
        if self.sky == Sky::Cloudy {
            for (cx, cy) in [(7.0, 4.0), (22.0, 5.0)] {
                for y in 0..10 {
                    for x in 0..SIZE {
                        let (dx, dy) = ((x as f64 - cx) / 5.0, (y as f64 - cy) / 2.5);
                        if dx * dx + dy * dy <= 1.0 {
                            img.set_pixel(x, y, [228, 228, 232]);
                        }
                    }
                }
            }
        }
        for y in LINE_ROWS {
            for x in 0..SIZE {
                img.set_pixel(x, y, [30, 30, 30]);
            }
        }
        let (x0, y0, x1, y1) = self.object_rect();
        let cx = self.centre_x() as i64;
        for y in y0..y1 {
            for x in x0..x1 {
                let colour = match self.object {
                    ObjectKind::Insulator => Some([40, 90, 210]),
                    ObjectKind::Damper => Some([140, 140, 140]),
                    ObjectKind::BirdNest => {
                        let (dx, dy) = ((x as f64 - cx as f64) / 6.5, (y as f64 - 9.0) / 5.0);
                        (dx * dx + dy * dy <= 1.0).then_some([125, 80, 35])
                    }
                    ObjectKind::Kite => {
                        let d = (x as i64 - cx).abs() + (y as i64 - 22).abs();
                        (d <= 6).then_some([220, 35, 35])
                    }
                };
                if let Some(c) = colour {
                    img.set_pixel(x, y, c);
                }
            }
        }
        if self.variant > 0 {
            for y in 0..SIZE {
                for x in 0..SIZE {
                    let p = img.pixel(x, y);
                    let jitter = |v: u8, r: i16| (v as i16 + r).clamp(0, 255) as u8;
                    let q = [
                        jitter(p[0], rng.random_range(-6..=6)),
                        jitter(p[1], rng.random_range(-6..=6)),
                        jitter(p[2], rng.random_range(-6..=6)),
                    ];
                    img.set_pixel(x, y, q);
                }
            }
        }
        img
    }

    pub fn captions(&self) -> CaptionRecord {
        let (o, a, sky, side) = (
            self.object.name(),
            self.object.with_article(),
            self.sky.name(),
            self.side.name(),
        );
        CaptionRecord {
            image: self.file_name(),
            captions: vec![
                format!("{a} on a power line under a {sky} sky."),
                format!("a power line with {a} on the {side} side."),
                format!("the {o} is on the {side} of the image."),
                format!("an inspection photo of a power line and {a}."),
            ],
            sources: ["captioner-a", "captioner-b", "captioner-c", "captioner-d"]
                .map(String::from)
                .to_vec(),
        }
    }

    pub fn detections(&self) -> DetectionRecord {
        let s = SIZE as f64;
        let (x0, y0, x1, y1) = self.object_rect();
        let conf = 0.85 + 0.1 * self.rng().random::<f64>();
        DetectionRecord {
            image: self.file_name(),
            boxes: vec![
                Detection {
                    label: self.object.name().into(),
                    x: x0 as f64 / s,
                    y: y0 as f64 / s,
                    w: (x1 - x0) as f64 / s,
                    h: (y1 - y0) as f64 / s,
                    conf,
                },
                Detection {
                    label: "power line".into(),
                    x: 0.0,
                    y: LINE_ROWS.start as f64 / s,
                    w: 1.0,
                    h: LINE_ROWS.len() as f64 / s,
                    conf: 0.8,
                },
            ],
        }
    }
}

/// Exemplar conversations for every sample type.
pub fn seed_templates() -> Vec<SeedTemplate> {
    let t = |kind, text: &str| SeedTemplate {
        kind,
        text: text.to_string(),
    };
    use SampleType::*;
    vec![
        t(
            Detailed,
            r#"{"turns":[{"question":"Describe the image in detail.","response":"a steel tower carries three conductors across a field; a glass insulator string hangs from the middle arm."}]}"#,
        ),
        t(
            Detailed,
            r#"{"turns":[{"question":"What does this inspection photo show?","response":"a distribution pole with a transformer, two crossarms and a bird nest wedged under the top arm."}]}"#,
        ),
        t(
            Detailed,
            r#"{"turns":[{"question":"Give a detailed description of the scene.","response":"a single conductor spans the frame against an overcast sky, with a vibration damper near the clamp."}]}"#,
        ),
        t(
            Detailed,
            r#"{"turns":[{"question":"Describe what you see.","response":"two parallel lines cross a hillside; a torn kite is tangled around the lower conductor."}]}"#,
        ),
        t(
            Conversation,
            r#"{"turns":[{"question":"What is attached to the line?","response":"an insulator string."},{"question":"Is it damaged?","response":"no, the discs look intact."}]}"#,
        ),
        t(
            Conversation,
            r#"{"turns":[{"question":"What is on the tower?","response":"a bird nest."},{"question":"Where is it?","response":"on the left crossarm."},{"question":"Is the weather clear?","response":"yes, the sky is clear."}]}"#,
        ),
        t(
            Conversation,
            r#"{"turns":[{"question":"How many conductors are visible?","response":"three."},{"question":"Is anything caught on them?","response":"yes, a kite on the right span."}]}"#,
        ),
        t(
            Conversation,
            r#"{"turns":[{"question":"What is the sky like?","response":"the sky is cloudy."},{"question":"What object is near the clamp?","response":"a damper."}]}"#,
        ),
        t(
            Complex,
            r#"{"turns":[{"question":"Why could the object on the crossarm be a problem?","response":"the nest is built from dry twigs close to an energized conductor, so it can cause a flashover or fire and should be removed."}]}"#,
        ),
        t(
            Complex,
            r#"{"turns":[{"question":"Does the line need maintenance?","response":"the insulators are clean and the dampers are in place, so the line looks healthy and only routine inspection is needed."}]}"#,
        ),
        t(
            Complex,
            r#"{"turns":[{"question":"What risk does the kite pose?","response":"a kite string can become conductive when wet and bridge two phases, so it should be removed before it causes an outage."}]}"#,
        ),
        t(
            Complex,
            r#"{"turns":[{"question":"What is the purpose of the device near the clamp?","response":"it is a stockbridge damper that absorbs wind-induced vibration, which prevents fatigue damage to the conductor strands."}]}"#,
        ),
    ]
}

/// Single-turn caption pairs for alignment: one sample per caption.
pub fn caption_pairs(scenes: &[Scene], seed: u64) -> Result<Vec<ConversationSample>> {
    let mut out = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        for (j, caption) in scene.captions().captions.iter().enumerate() {
            let k = (i * 4 + j) as u64;
            out.push(make_single_turn(
                format!("pair-{scene}-{j}"),
                Some(scene.file_name()),
                caption,
                BRIEF_QUESTIONS,
                seed.wrapping_add(k),
            )?);
        }
    }
    Ok(out)
}

pub const OBJECT_QUESTION: &str = "What object is on the power line?";
pub const SKY_QUESTION: &str = "What is the sky like?";
pub const SIDE_QUESTION: &str = "Which side of the image is the object on?";

/// `n` items cycling over object, sky and side questions about `scenes`,
/// with seeded option order.
pub fn mcq_items(scenes: &[Scene], n: usize, seed: u64) -> Result<Vec<McqItem>> {
    if scenes.is_empty() {
        return Err(Error::Input("no scenes for MCQ items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let scene = scenes[order[i % order.len()]];
        let (question, answer, mut options): (&str, &str, Vec<&str>) = match i % 3 {
            0 => (
                OBJECT_QUESTION,
                scene.object.name(),
                ObjectKind::ALL.iter().map(|o| o.name()).collect(),
            ),
            1 => (SKY_QUESTION, scene.sky.name(), vec!["clear", "cloudy"]),
            _ => (SIDE_QUESTION, scene.side.name(), vec!["left", "right"]),
        };
        options.shuffle(&mut rng);
        items.push(McqItem {
            id: format!("mcq-{i:03}"),
            image: Some(scene.file_name()),
            question: question.into(),
            answer_index: options.iter().position(|&o| o == answer).expect("answer listed"),
            options: options.into_iter().map(String::from).collect(),
        });
    }
    Ok(items)
}

/// Paths of a world written by [`write_world`], relative to its root.
pub const IMAGES_DIR: &str = "images";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const TEMPLATES_FILE: &str = "templates.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const MCQ_FILE: &str = "mcq.jsonl";

/// Writes images, annotations, templates, caption pairs and `mcq_count`
/// MCQ items under `root`.
pub fn write_world(root: &Path, variants: u32, mcq_count: usize, seed: u64) -> Result<Vec<Scene>> {
    let scenes = Scene::all(variants);
    let images = root.join(IMAGES_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in &scenes {
        s.render().save(&images.join(s.file_name()))?;
    }
    let captions: Vec<_> = scenes.iter().map(Scene::captions).collect();
    let detections: Vec<_> = scenes.iter().map(Scene::detections).collect();
    write_jsonl(&root.join(CAPTIONS_FILE), &captions)?;
    write_jsonl(&root.join(DETECTIONS_FILE), &detections)?;
    write_jsonl(&root.join(TEMPLATES_FILE), &seed_templates())?;
    write_jsonl(&root.join(PAIRS_FILE), &caption_pairs(&scenes, seed)?)?;
    write_jsonl(&root.join(MCQ_FILE), &mcq_items(&scenes, mcq_count, seed)?)?;
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{build_context, TemplateBank};

    #[test]
    fn sixteen_distinct_scenes_per_variant() {
        let scenes = Scene::all(2);
        assert_eq!(scenes.len(), 32);
        let mut imgs: Vec<_> = scenes.iter().map(|s| s.render().to_ppm()).collect();
        imgs.sort();
        imgs.dedup();
        assert_eq!(imgs.len(), 32);
    }

    #[test]
    fn annotations_are_valid_and_joinable() {
        for s in Scene::all(2) {
            let c = s.captions();
            let d = s.detections();
            let ctx = build_context(&c, &d).unwrap();
            assert!(ctx.contains(s.object.name()));
            assert!(ctx.contains(s.sky.name()));
        }
    }

    #[test]
    fn object_box_side_matches_scene() {
        for s in Scene::all(3) {
            let b = &s.detections().boxes[0];
            let left = b.x + b.w / 2.0 < 0.5;
            assert_eq!(left, s.side == Side::Left, "{s}");
        }
    }

    #[test]
    fn templates_cover_every_type() {
        let bank = TemplateBank::new(seed_templates()).unwrap();
        for kind in SampleType::ALL {
            bank.require(kind).unwrap();
        }
    }

    #[test]
    fn mcq_answers_follow_scene() {
        let scenes = Scene::all(1);
        let items = mcq_items(&scenes, 40, 0).unwrap();
        assert_eq!(items.len(), 40);
        for it in &items {
            it.validate().unwrap();
            let answer = &it.options[it.answer_index];
            assert!(it.image.as_ref().unwrap().contains(&answer.replace(' ', "_")));
        }
    }
}
