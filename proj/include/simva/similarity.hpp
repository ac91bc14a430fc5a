#pragma once

#include <vector>

#include "simva/autodiff.hpp"
#include "simva/features.hpp"
#include "simva/tensor.hpp"

namespace simva {

struct SimilarityVolume {
    Tensor values; // [T, H, W, M], cosines in [-1, 1]
    std::vector<int64_t> class_indices;
};

// Volume stages, in pipeline order.
enum class Stage { Z0, Zsa, ZsaMod, Zta };

struct EmbeddedVolume {
    Tensor values; // [T, H, W, M, d_f]
    Stage stage = Stage::Z0;
};

struct EmbedConvParams {
    Tensor kernel; // [7, 7, 1, d_f]
    Tensor bias;   // [d_f]
};

// Throws SingularityError naming the offending (t,i,j) patch or text row c.
void validate_similarity_inputs(const Tensor& patch_features, const Tensor& text_rows);

// Patch-wise cosine similarity between every spatio-temporal location and
// every candidate class row.
SimilarityVolume build_similarity(const EncodedVideo& video, const Tensor& text_rows,
                                  std::vector<int64_t> class_indices = {});

// Shared 7x7 spatial convolution per (t, c) slice, zero padding 3.
EmbeddedVolume embed_volume(const SimilarityVolume& sim, const EmbedConvParams& params);

// Graph versions used inside the differentiable pipeline.
ag::NodePtr similarity_graph(const ag::NodePtr& patch_features, const ag::NodePtr& text_rows);
ag::NodePtr embed_volume_graph(const ag::NodePtr& sim, const ag::NodePtr& kernel, const ag::NodePtr& bias);

} // namespace simva
