//! Synthetic shape-world benchmark: scene generation, rasterization, a
//! closed referring-expression language with a brute-force resolver, and the
//! JSON-lines dataset format.

pub mod dataset;
pub mod language;
pub mod render;
pub mod scene;

pub use dataset::{
    build_split, generate_dataset, manifest_path, read_dataset, write_dataset, write_vocab,
    DatasetSpec, GroundingSample, SampleMeta,
};
pub use language::{
    attribute_tags, generate_query, parse_query, resolve_query, tier_bin, COLOR_KEYWORDS,
    LOCATION_KEYWORDS, PAD_WORD, SIZE_KEYWORDS, WORDS,
};
pub use render::{pixel_scan_bbox, render_scene, render_scene_u8, BACKGROUND};
pub use scene::{
    generate_scene, ColorKind, GenConfig, SceneObject, ShapeKind, ShapeWorldScene, SizeClass,
};
