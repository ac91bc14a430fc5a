#include "simva/features.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "simva/checkpoint.hpp"
#include "simva/errors.hpp"
#include "simva/rng.hpp"

namespace simva {

namespace {

// Pixel cell used by the synthetic generator; matches the default encoder
// patch so integer velocities stay aligned with the feature grid.
constexpr int64_t kCellPx = 8;

void validate_clip(const VideoClip& clip) {
    const Shape& s = clip.frames.shape();
    if (s.size() != 4 || s[3] != 3)
        throw ShapeError("clip '" + clip.clip_id + "': frames must be [T,H0,W0,3], got " + shape_str(s));
    if (s[0] < 1) throw ValidationError("clip '" + clip.clip_id + "': T must be >= 1");
}

} // namespace

EncodedVideo encode_video_stub(const VideoClip& clip, int64_t D, int64_t patch, uint64_t seed) {
    validate_clip(clip);
    if (D < 1 || patch < 1) throw ValidationError("encode_video_stub: D and patch must be >= 1");
    const int64_t T = clip.frames.dim(0), H0 = clip.frames.dim(1), W0 = clip.frames.dim(2);
    if (H0 % patch != 0)
        throw ShapeError("encode_video_stub: H0=" + std::to_string(H0) + " not divisible by patch=" +
                         std::to_string(patch));
    if (W0 % patch != 0)
        throw ShapeError("encode_video_stub: W0=" + std::to_string(W0) + " not divisible by patch=" +
                         std::to_string(patch));
    const int64_t H = H0 / patch, W = W0 / patch;
    const int64_t in_dim = patch * patch * 3;

    // Fixed random projection, generated and applied in 32-bit.
    Rng rng(mix_seed(seed, 0x5eedf00dULL));
    std::vector<float> proj(static_cast<size_t>(D * in_dim));
    const float inv_sqrt_in = 1.0f / std::sqrt(static_cast<float>(in_dim));
    for (auto& p : proj) p = static_cast<float>(rng.normal()) * inv_sqrt_in;

    EncodedVideo out;
    out.clip_id = clip.clip_id;
    out.patch_features = Tensor({T, H, W, D});
    out.cls_tokens = Tensor({T, D});

    std::vector<float> pixels(static_cast<size_t>(in_dim));
    std::vector<float> preact(static_cast<size_t>(D));
    std::vector<float> cls_acc(static_cast<size_t>(D));
    for (int64_t t = 0; t < T; ++t) {
        std::fill(cls_acc.begin(), cls_acc.end(), 0.0f);
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                size_t px = 0;
                for (int64_t y = 0; y < patch; ++y)
                    for (int64_t x = 0; x < patch; ++x)
                        for (int64_t c = 0; c < 3; ++c)
                            pixels[px++] =
                                static_cast<float>(clip.frames.at({t, i * patch + y, j * patch + x, c}));
                for (int64_t d = 0; d < D; ++d) {
                    const float* row = proj.data() + d * in_dim;
                    float acc = 0.0f;
                    for (int64_t q = 0; q < in_dim; ++q) acc += row[q] * pixels[static_cast<size_t>(q)];
                    preact[static_cast<size_t>(d)] = acc;
                    cls_acc[static_cast<size_t>(d)] += acc;
                    out.patch_features.at({t, i, j, d}) = static_cast<double>(std::tanh(acc));
                }
            }
        const float inv_hw = 1.0f / static_cast<float>(H * W);
        for (int64_t d = 0; d < D; ++d)
            out.cls_tokens.at({t, d}) =
                static_cast<double>(std::tanh(cls_acc[static_cast<size_t>(d)] * inv_hw));
    }
    return out;
}

TextEmbeddingSet encode_text_stub(const std::vector<std::string>& class_names, int64_t D, uint64_t seed) {
    if (class_names.empty()) throw ValidationError("encode_text_stub: empty class name list");
    if (D < 1) throw ValidationError("encode_text_stub: D must be >= 1");
    std::set<std::string> uniq(class_names.begin(), class_names.end());
    if (uniq.size() != class_names.size())
        throw ValidationError("encode_text_stub: duplicate class names");
    TextEmbeddingSet out;
    out.class_names = class_names;
    out.embeddings = Tensor({static_cast<int64_t>(class_names.size()), D});
    for (size_t c = 0; c < class_names.size(); ++c) {
        Rng rng(mix_seed(seed, hash_string(class_names[c])));
        for (int64_t d = 0; d < D; ++d)
            out.embeddings.at({static_cast<int64_t>(c), d}) =
                static_cast<double>(static_cast<float>(rng.normal()));
    }
    return out;
}

std::vector<std::array<int, 2>> default_motion_profiles(int64_t n_classes) {
    static const std::array<std::array<int, 2>, 8> dirs = {
        {{{0, 1}}, {{0, -1}}, {{1, 0}}, {{-1, 0}}, {{1, 1}}, {{-1, -1}}, {{1, -1}}, {{-1, 1}}}};
    std::vector<std::array<int, 2>> out;
    for (int64_t c = 0; c < n_classes; ++c) {
        int speed = 1 + static_cast<int>(c / 8);
        auto d = dirs[static_cast<size_t>(c % 8)];
        out.push_back({d[0] * speed, d[1] * speed});
    }
    return out;
}

std::vector<VideoClip> make_synthetic_dataset(const SyntheticDatasetSpec& spec) {
    if (spec.n_classes < 2) throw ValidationError("synthetic dataset: n_classes must be >= 2");
    if (spec.clips_per_class < 1) throw ValidationError("synthetic dataset: clips_per_class must be >= 1");
    if (spec.T < 1) throw ValidationError("synthetic dataset: T must be >= 1");
    if (spec.H0 % kCellPx != 0 || spec.W0 % kCellPx != 0)
        throw ValidationError("synthetic dataset: H0 and W0 must be multiples of " + std::to_string(kCellPx));
    const int64_t gh = spec.H0 / kCellPx, gw = spec.W0 / kCellPx;
    auto profiles = spec.motion_profiles.empty() ? default_motion_profiles(spec.n_classes)
                                                 : spec.motion_profiles;
    if (static_cast<int64_t>(profiles.size()) < spec.n_classes)
        throw ValidationError("synthetic dataset: need a motion profile per class");

    // One fixed blob bump, shared by all classes; only its trajectory differs.
    const int64_t bump_px = 2 * kCellPx;
    Tensor bump({bump_px, bump_px});
    const double center = (static_cast<double>(bump_px) - 1.0) / 2.0;
    const double sigma = 0.75 * static_cast<double>(kCellPx);
    for (int64_t y = 0; y < bump_px; ++y)
        for (int64_t x = 0; x < bump_px; ++x) {
            double dy = (static_cast<double>(y) - center) / sigma;
            double dx = (static_cast<double>(x) - center) / sigma;
            bump.at({y, x}) = std::exp(-0.5 * (dy * dy + dx * dx));
        }
    const double background = 0.2;
    const double amplitude[3] = {0.8, 0.7, 0.6};

    std::vector<VideoClip> clips;
    for (int64_t c = 0; c < spec.n_classes; ++c) {
        const auto v = profiles[static_cast<size_t>(c)];
        for (int64_t k = 0; k < spec.clips_per_class; ++k) {
            Rng rng(mix_seed(mix_seed(spec.seed, static_cast<uint64_t>(c)), static_cast<uint64_t>(k)));
            int64_t py = rng.uniform_int(gh);
            int64_t px = rng.uniform_int(gw);
            VideoClip clip;
            clip.label = c;
            clip.clip_id = "synthetic/c" + std::to_string(c) + "/k" + std::to_string(k);
            clip.frames = Tensor::full({spec.T, spec.H0, spec.W0, 3}, background);
            for (int64_t t = 0; t < spec.T; ++t) {
                int64_t cy = ((py + t * v[0]) % gh + gh) % gh;
                int64_t cx = ((px + t * v[1]) % gw + gw) % gw;
                for (int64_t y = 0; y < bump_px; ++y)
                    for (int64_t x = 0; x < bump_px; ++x) {
                        int64_t iy = (cy * kCellPx + y) % spec.H0;
                        int64_t ix = (cx * kCellPx + x) % spec.W0;
                        for (int64_t ch = 0; ch < 3; ++ch)
                            clip.frames.at({t, iy, ix, ch}) =
                                background + amplitude[ch] * bump.at({y, x});
                    }
            }
            clips.push_back(std::move(clip));
        }
    }
    return clips;
}

void save_encoded_video(const EncodedVideo& v, const std::string& path) {
    Container c;
    c.kind = "encoded_video";
    c.metadata["clip_id"] = v.clip_id;
    c.arrays.push_back({"patch_features", DType::f32, v.patch_features});
    c.arrays.push_back({"cls_tokens", DType::f32, v.cls_tokens});
    save_container(c, path);
}

void save_text_embeddings(const TextEmbeddingSet& t, const std::string& path) {
    Container c;
    c.kind = "text_embedding_set";
    c.config = nlohmann::ordered_json{{"class_names", t.class_names}};
    c.arrays.push_back({"embeddings", DType::f32, t.embeddings});
    save_container(c, path);
}

LoadedFeatures load_features(const std::string& path) {
    Container c = load_container(path);
    LoadedFeatures out;
    if (c.kind == "encoded_video") {
        EncodedVideo v;
        v.patch_features = c.require("patch_features").data;
        v.cls_tokens = c.require("cls_tokens").data;
        if (v.patch_features.ndim() != 4)
            throw FormatError("patch_features must be rank 4, got " +
                              shape_str(v.patch_features.shape()));
        if (v.cls_tokens.ndim() != 2 || v.cls_tokens.dim(0) != v.patch_features.dim(0) ||
            v.cls_tokens.dim(1) != v.patch_features.dim(3))
            throw FormatError("cls_tokens shape " + shape_str(v.cls_tokens.shape()) +
                              " inconsistent with patch_features " + shape_str(v.patch_features.shape()));
        auto it = c.metadata.find("clip_id");
        v.clip_id = it == c.metadata.end() ? "" : it->second;
        out.video = std::move(v);
    } else if (c.kind == "text_embedding_set") {
        TextEmbeddingSet t;
        t.embeddings = c.require("embeddings").data;
        if (t.embeddings.ndim() != 2)
            throw FormatError("embeddings must be rank 2, got " + shape_str(t.embeddings.shape()));
        if (!c.config.is_null() && c.config.contains("class_names"))
            t.class_names = c.config["class_names"].get<std::vector<std::string>>();
        if (static_cast<int64_t>(t.class_names.size()) != t.embeddings.dim(0))
            throw FormatError("class_names count " + std::to_string(t.class_names.size()) +
                              " does not match embeddings rows " + std::to_string(t.embeddings.dim(0)));
        out.texts = std::move(t);
    } else {
        throw FormatError("file '" + path + "' holds kind '" + c.kind + "', not a feature container");
    }
    return out;
}

} // namespace simva
