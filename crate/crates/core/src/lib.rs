pub mod cnn;
pub mod cvae;
pub mod dfscode;
pub mod features;
pub mod graph;
pub mod pipeline;

/// Guide snippets, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/graphs.md")]
    struct Graphs;
    #[doc = include_str!("../../../book/src/features.md")]
    struct Features;
    #[doc = include_str!("../../../book/src/dfscode.md")]
    struct DfsCode;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/cvae.md")]
    struct Cvae;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
}
