//! Corpora: procedural portraits, generator samples, sketches, label maps,
//! component decompositions and the dataset directory layout.

pub mod components;
pub mod dataset;
pub mod procedural;
pub mod raster;
pub mod schema;
pub mod segment;
pub mod sketch;

pub use components::{
    decompose_components, extract_map_contour, stroke_coverage, Category, ComponentEntry, Rect,
};
pub use dataset::{
    build_training_samples, load_dataset, procedural_samples, sample_generator_dataset, save_dataset, Split,
    TrainingSample,
};
pub use procedural::{generate_procedural_corpus, render_sample, PoseTriplet, ProceduralSample};
pub use raster::ColorImage;
pub use schema::LabelSchema;
pub use segment::{extract_labels, pixel_accuracy, Segmenter, SegmenterConfig, SegmenterTraining};
pub use sketch::{extract_sketch, EdgeParams, SketchExtractor, SketchUNet};
