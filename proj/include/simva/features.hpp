#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "simva/tensor.hpp"

namespace simva {

struct VideoClip {
    Tensor frames; // [T, H0, W0, 3], values in [0, 1]
    std::optional<int64_t> label;
    std::string clip_id;
};

struct EncodedVideo {
    Tensor patch_features; // [T, H, W, D]
    Tensor cls_tokens;     // [T, D]
    std::string clip_id;
};

struct TextEmbeddingSet {
    Tensor embeddings; // [N_C, D]
    std::vector<std::string> class_names;

    int64_t n_classes() const { return embeddings.dim(0); }
    int64_t dim() const { return embeddings.dim(1); }
};

struct SyntheticDatasetSpec {
    int64_t n_classes = 8;
    int64_t clips_per_class = 8;
    int64_t T = 8;
    int64_t H0 = 32;
    int64_t W0 = 32;
    // Per-class patch-grid velocity (dy, dx) in patches/frame; blobs wrap on a
    // torus so pixel histograms are identical across classes. Empty -> default
    // compass directions.
    std::vector<std::array<int, 2>> motion_profiles;
    uint64_t seed = 0;
};

// Deterministic stand-in for a visual encoder: fixed random projection of raw
// patch pixels followed by tanh, everything computed in 32-bit. CLS token is
// the tanh of the frame-mean pre-activation.
EncodedVideo encode_video_stub(const VideoClip& clip, int64_t D, int64_t patch, uint64_t seed);

// Deterministic per-name embeddings (seeded by name hash).
TextEmbeddingSet encode_text_stub(const std::vector<std::string>& class_names, int64_t D, uint64_t seed);

std::vector<VideoClip> make_synthetic_dataset(const SyntheticDatasetSpec& spec);

std::vector<std::array<int, 2>> default_motion_profiles(int64_t n_classes);

// Feature files reuse the checkpoint container format.
void save_encoded_video(const EncodedVideo& v, const std::string& path);
void save_text_embeddings(const TextEmbeddingSet& t, const std::string& path);

struct LoadedFeatures {
    std::optional<EncodedVideo> video;
    std::optional<TextEmbeddingSet> texts;
};
LoadedFeatures load_features(const std::string& path);

} // namespace simva
