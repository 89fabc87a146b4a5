//! The closed query language: vocabulary, a brute-force semantic resolver,
//! and template-based query generation with a uniqueness guarantee.
//!
//! Grammar accepted by the resolver:
//!
//! ```text
//! query  := ["the"] desc [constraint]
//! desc   := [size] [color] shape
//! constraint := "on" "the" side
//!             | ("above" | "below") ["the"] desc
//!             | ("left" | "right") "of" ["the"] desc
//! side   := "left" | "right" | "top" | "bottom"
//! ```
//!
//! Absolute sides split the image at its midlines by object center; relations
//! compare object centers and are existential over the related description.
//! The resolver is pure, is only ever used for data generation and tests,
//! and never feeds the model.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

use super::scene::{ColorKind, SceneObject, ShapeKind, ShapeWorldScene, SizeClass};

/// Closed vocabulary in index order; the reserved padding entry comes first
/// and never appears in a query.
pub const PAD_WORD: &str = "<pad>";

pub const WORDS: [&str; 22] = [
    PAD_WORD, "the", "circle", "square", "triangle", "red", "green", "blue", "yellow", "gray",
    "small", "little", "large", "big", "left", "right", "top", "bottom", "above", "below", "on",
    "of",
];

/// Attribute keyword subsets used for the evaluation break-down, restricted
/// to this vocabulary.
pub const COLOR_KEYWORDS: [&str; 5] = ["red", "green", "blue", "yellow", "gray"];
pub const LOCATION_KEYWORDS: [&str; 6] = ["left", "right", "top", "bottom", "above", "below"];
pub const SIZE_KEYWORDS: [&str; 4] = ["small", "little", "large", "big"];

/// Sorted attribute tags for a token sequence.
pub fn attribute_tags(tokens: &[String]) -> Vec<String> {
    let mut tags = BTreeSet::new();
    for t in tokens {
        if COLOR_KEYWORDS.contains(&t.as_str()) {
            tags.insert("color".to_string());
        }
        if LOCATION_KEYWORDS.contains(&t.as_str()) {
            tags.insert("location".to_string());
        }
        if SIZE_KEYWORDS.contains(&t.as_str()) {
            tags.insert("size".to_string());
        }
    }
    tags.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rel {
    LeftOf,
    RightOf,
    Above,
    Below,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Desc {
    pub size: Option<SizeClass>,
    pub color: Option<ColorKind>,
    pub shape: Option<ShapeKind>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    None,
    Abs(Side),
    Rel(Rel, Desc),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParsedQuery {
    pub desc: Desc,
    pub constraint: Constraint,
}

fn shape_of(word: &str) -> Option<ShapeKind> {
    ShapeKind::ALL.iter().copied().find(|s| s.word() == word)
}

fn color_of(word: &str) -> Option<ColorKind> {
    ColorKind::ALL.iter().copied().find(|c| c.word() == word)
}

fn size_of(word: &str) -> Option<SizeClass> {
    match word {
        "small" | "little" => Some(SizeClass::Small),
        "large" | "big" => Some(SizeClass::Large),
        _ => None,
    }
}

struct Parser<'a> {
    tokens: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(|s| s.as_str())
    }

    fn bump(&mut self) -> Option<&'a str> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn accept(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn fail(&self, tokens: &[String], msg: &str) -> Error {
        Error::QueryParse {
            tokens: tokens.to_vec(),
            msg: msg.to_string(),
        }
    }

    fn parse_desc(&mut self, tokens: &[String]) -> Result<Desc> {
        let mut desc = Desc::default();
        if let Some(w) = self.peek() {
            if let Some(s) = size_of(w) {
                desc.size = Some(s);
                self.pos += 1;
            }
        }
        if let Some(w) = self.peek() {
            if let Some(c) = color_of(w) {
                desc.color = Some(c);
                self.pos += 1;
            }
        }
        match self.bump().and_then(shape_of) {
            Some(s) => {
                desc.shape = Some(s);
                Ok(desc)
            }
            None => Err(self.fail(tokens, "expected a shape word")),
        }
    }
}

/// Parse a token sequence into its description and constraint. Every token
/// must come from the closed vocabulary; anything else is an
/// [`Error::UnknownToken`].
pub fn parse_query(tokens: &[String]) -> Result<ParsedQuery> {
    for t in tokens {
        if !WORDS.contains(&t.as_str()) || t == PAD_WORD {
            return Err(Error::UnknownToken { token: t.clone() });
        }
    }
    let mut p = Parser { tokens, pos: 0 };
    p.accept("the");
    let desc = p.parse_desc(tokens)?;
    let constraint = match p.peek() {
        None => Constraint::None,
        Some("on") => {
            p.pos += 1;
            if !p.accept("the") {
                return Err(p.fail(tokens, "expected 'the' after 'on'"));
            }
            let side = match p.bump() {
                Some("left") => Side::Left,
                Some("right") => Side::Right,
                Some("top") => Side::Top,
                Some("bottom") => Side::Bottom,
                _ => return Err(p.fail(tokens, "expected a side after 'on the'")),
            };
            Constraint::Abs(side)
        }
        Some("above") | Some("below") => {
            let rel = if p.bump() == Some("above") {
                Rel::Above
            } else {
                Rel::Below
            };
            p.accept("the");
            Constraint::Rel(rel, p.parse_desc(tokens)?)
        }
        Some("left") | Some("right") => {
            let rel = if p.bump() == Some("left") {
                Rel::LeftOf
            } else {
                Rel::RightOf
            };
            if !p.accept("of") {
                return Err(p.fail(tokens, "expected 'of' after relation side"));
            }
            p.accept("the");
            Constraint::Rel(rel, p.parse_desc(tokens)?)
        }
        Some(_) => return Err(p.fail(tokens, "unexpected token after description")),
    };
    if p.pos != tokens.len() {
        return Err(p.fail(tokens, "trailing tokens"));
    }
    Ok(ParsedQuery { desc, constraint })
}

pub fn matches_desc(obj: &SceneObject, desc: &Desc) -> bool {
    desc.shape.is_none_or(|s| obj.shape == s)
        && desc.color.is_none_or(|c| obj.color == c)
        && desc.size.is_none_or(|s| obj.size == s)
}

fn on_side(obj: &SceneObject, side: Side, image_size: usize) -> bool {
    let half = image_size as f64 / 2.0;
    match side {
        Side::Left => obj.center.0 < half,
        Side::Right => obj.center.0 > half,
        Side::Top => obj.center.1 < half,
        Side::Bottom => obj.center.1 > half,
    }
}

fn rel_holds(a: &SceneObject, b: &SceneObject, rel: Rel) -> bool {
    match rel {
        Rel::LeftOf => a.center.0 < b.center.0,
        Rel::RightOf => a.center.0 > b.center.0,
        Rel::Above => a.center.1 < b.center.1,
        Rel::Below => a.center.1 > b.center.1,
    }
}

/// Brute-force evaluation: the set of object indices satisfying every
/// predicate in the query.
pub fn resolve_query(scene: &ShapeWorldScene, tokens: &[String]) -> Result<BTreeSet<usize>> {
    let q = parse_query(tokens)?;
    let mut out = BTreeSet::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        if !matches_desc(obj, &q.desc) {
            continue;
        }
        let ok = match &q.constraint {
            Constraint::None => true,
            Constraint::Abs(side) => on_side(obj, *side, scene.image_size),
            Constraint::Rel(rel, other_desc) => scene.objects.iter().enumerate().any(|(j, o)| {
                j != i && matches_desc(o, other_desc) && rel_holds(obj, o, *rel)
            }),
        };
        if ok {
            out.insert(i);
        }
    }
    Ok(out)
}

/// Token-count bins per complexity tier, mirroring the 1-2 / 3 / 4-5 / 6+
/// query-length break-down.
pub fn tier_bin(tier: u8) -> (usize, usize) {
    match tier {
        1 => (1, 2),
        2 => (3, 3),
        3 => (4, 5),
        _ => (6, usize::MAX),
    }
}

fn size_word(rng: &mut ChaCha8Rng, size: SizeClass) -> &'static str {
    match size {
        SizeClass::Small => {
            if rng.random::<bool>() {
                "small"
            } else {
                "little"
            }
        }
        SizeClass::Large => {
            if rng.random::<bool>() {
                "large"
            } else {
                "big"
            }
        }
    }
}

/// Draw one candidate query for `target` at the given tier. May fail to be
/// unique; the caller rejects against the resolver.
fn sample_candidate(
    scene: &ShapeWorldScene,
    target: usize,
    tier: u8,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<String>> {
    let t = &scene.objects[target];
    let mut toks: Vec<String> = Vec::new();
    let push = |toks: &mut Vec<String>, s: &str| toks.push(s.to_string());
    match tier {
        1 => match rng.random_range(0..3) {
            0 => push(&mut toks, t.shape.word()),
            1 => {
                push(&mut toks, t.color.word());
                push(&mut toks, t.shape.word());
            }
            _ => {
                push(&mut toks, size_word(rng, t.size));
                push(&mut toks, t.shape.word());
            }
        },
        2 => match rng.random_range(0..3) {
            0 => {
                push(&mut toks, "the");
                push(&mut toks, t.color.word());
                push(&mut toks, t.shape.word());
            }
            1 => {
                push(&mut toks, size_word(rng, t.size));
                push(&mut toks, t.color.word());
                push(&mut toks, t.shape.word());
            }
            _ => {
                push(&mut toks, "the");
                push(&mut toks, size_word(rng, t.size));
                push(&mut toks, t.shape.word());
            }
        },
        3 => {
            let side = true_sides(t, scene.image_size);
            match rng.random_range(0..3) {
                0 => {
                    push(&mut toks, "the");
                    push(&mut toks, size_word(rng, t.size));
                    push(&mut toks, t.color.word());
                    push(&mut toks, t.shape.word());
                }
                1 => {
                    let side = side.choose(rng)?;
                    push(&mut toks, t.shape.word());
                    push(&mut toks, "on");
                    push(&mut toks, "the");
                    push(&mut toks, side.word());
                }
                _ => {
                    let side = side.choose(rng)?;
                    push(&mut toks, t.color.word());
                    push(&mut toks, t.shape.word());
                    push(&mut toks, "on");
                    push(&mut toks, "the");
                    push(&mut toks, side.word());
                }
            }
        }
        _ => {
            if rng.random::<f64>() < 0.35 {
                // absolute-location form: the [size] [color] shape on the side
                let side = *true_sides(t, scene.image_size).choose(rng)?;
                push(&mut toks, "the");
                push(&mut toks, size_word(rng, t.size));
                push(&mut toks, t.color.word());
                push(&mut toks, t.shape.word());
                push(&mut toks, "on");
                push(&mut toks, "the");
                push(&mut toks, side.word());
            } else {
                // relational form against another object
                let rel = *[Rel::LeftOf, Rel::RightOf, Rel::Above, Rel::Below]
                    .iter()
                    .filter(|r| {
                        scene
                            .objects
                            .iter()
                            .enumerate()
                            .any(|(j, o)| j != target && rel_holds(t, o, **r))
                    })
                    .collect::<Vec<_>>()
                    .choose(rng)?;
                let others: Vec<usize> = (0..scene.objects.len())
                    .filter(|&j| j != target && rel_holds(t, &scene.objects[j], *rel))
                    .collect();
                let other = &scene.objects[*others.choose(rng)?];
                if rng.random::<bool>() {
                    push(&mut toks, "the");
                    push(&mut toks, t.color.word());
                    push(&mut toks, t.shape.word());
                } else {
                    push(&mut toks, "the");
                    push(&mut toks, size_word(rng, t.size));
                    push(&mut toks, t.shape.word());
                }
                match rel {
                    Rel::LeftOf => {
                        push(&mut toks, "left");
                        push(&mut toks, "of");
                    }
                    Rel::RightOf => {
                        push(&mut toks, "right");
                        push(&mut toks, "of");
                    }
                    Rel::Above => push(&mut toks, "above"),
                    Rel::Below => push(&mut toks, "below"),
                }
                push(&mut toks, "the");
                if rng.random::<bool>() {
                    push(&mut toks, other.color.word());
                } else {
                    push(&mut toks, size_word(rng, other.size));
                }
                push(&mut toks, other.shape.word());
            }
        }
    }
    Some(toks)
}

fn true_sides(obj: &SceneObject, image_size: usize) -> Vec<Side> {
    [Side::Left, Side::Right, Side::Top, Side::Bottom]
        .into_iter()
        .filter(|s| on_side(obj, *s, image_size))
        .collect()
}

/// How many candidates to draw per tier before escalating.
const UNIQUENESS_ATTEMPTS: usize = 50;

/// Generate a query whose resolution is exactly `{target}`. Starts at the
/// requested tier and escalates on failure; the achieved tier is returned
/// with the tokens. Errors when no unique description exists at tier 4.
pub fn generate_query(
    scene: &ShapeWorldScene,
    target: usize,
    tier: u8,
    rng_seed: u64,
) -> Result<(Vec<String>, u8)> {
    if target >= scene.objects.len() {
        return Err(Error::Contract(format!(
            "target {target} out of range ({} objects)",
            scene.objects.len()
        )));
    }
    if !(1..=4).contains(&tier) {
        return Err(Error::Contract(format!("tier {tier} outside 1..=4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for t in tier..=4 {
        for _ in 0..UNIQUENESS_ATTEMPTS {
            let Some(tokens) = sample_candidate(scene, target, t, &mut rng) else {
                continue;
            };
            let (lo, hi) = tier_bin(t);
            debug_assert!(tokens.len() >= lo && tokens.len() <= hi);
            let resolved = resolve_query(scene, &tokens)?;
            if resolved.len() == 1 && resolved.contains(&target) {
                return Ok((tokens, t));
            }
        }
    }
    Err(Error::AmbiguousTarget { target, tier })
}
