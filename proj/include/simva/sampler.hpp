#pragma once

#include <optional>
#include <vector>

#include "simva/autodiff.hpp"
#include "simva/features.hpp"
#include "simva/tensor.hpp"

namespace simva {

struct GlobalAlignment {
    Tensor video_vec;    // [D], unit norm
    Tensor prior_scores; // [N_C], cosines
};

struct SampledVocabulary {
    std::vector<int64_t> indices; // I_M, sorted ascending
    Tensor restricted_embeddings; // [M, D], rows in index order
    bool noise_applied = false;
    std::optional<int64_t> gt_index;

    int64_t size() const { return static_cast<int64_t>(indices.size()); }
    // Position of a global class id within I_M, or -1.
    int64_t position_of(int64_t class_id) const;
};

// Mean CLS token, normalized, against normalized text rows.
GlobalAlignment global_alignment(const EncodedVideo& video, const TextEmbeddingSet& texts);

// Top-M selection over prior scores. In training mode, i.i.d. uniform noise
// in [0, noise_high) perturbs the scores and the ground truth is forced into
// the selection by replacing the weakest selected class.
SampledVocabulary sample_classes(const GlobalAlignment& align, const TextEmbeddingSet& texts, int64_t M,
                                 bool training, std::optional<int64_t> gt, uint64_t rng_seed,
                                 double noise_high = 0.5);

// Graph version of the prior (needed for the auxiliary global loss).
ag::NodePtr global_prior_graph(const ag::NodePtr& cls_tokens, const ag::NodePtr& text_embeddings);

} // namespace simva
