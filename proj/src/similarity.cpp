#include "simva/similarity.hpp"

#include <cmath>

#include "simva/errors.hpp"

namespace simva {

namespace {

ag::NodePtr normalize_rows(const ag::NodePtr& x) {
    const Shape& s = x->value.shape();
    std::vector<int64_t> last{static_cast<int64_t>(s.size()) - 1};
    ag::NodePtr inv = ag::rsqrt(ag::reduce_sum(ag::square(x), last, true));
    return ag::mul(x, ag::broadcast_to(inv, s));
}

} // namespace

void validate_similarity_inputs(const Tensor& patch_features, const Tensor& text_rows) {
    const Shape& fs = patch_features.shape();
    const Shape& ts = text_rows.shape();
    if (fs.size() != 4) throw ShapeError("patch features must be [T,H,W,D], got " + shape_str(fs));
    if (ts.size() != 2) throw ShapeError("text rows must be [M,D], got " + shape_str(ts));
    if (fs[3] != ts[1])
        throw ShapeError("feature dimension mismatch: video D=" + std::to_string(fs[3]) + ", text D=" +
                         std::to_string(ts[1]));
    const int64_t T = fs[0], H = fs[1], W = fs[2], D = fs[3];
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                double s = 0.0;
                for (int64_t d = 0; d < D; ++d) {
                    double v = patch_features.at({t, i, j, d});
                    s += v * v;
                }
                if (s == 0.0)
                    throw SingularityError("zero-norm patch feature at (t=" + std::to_string(t) + ", i=" +
                                           std::to_string(i) + ", j=" + std::to_string(j) + ")");
            }
    for (int64_t c = 0; c < ts[0]; ++c) {
        double s = 0.0;
        for (int64_t d = 0; d < D; ++d) {
            double v = text_rows.at({c, d});
            s += v * v;
        }
        if (s == 0.0) throw SingularityError("zero-norm text embedding row c=" + std::to_string(c));
    }
}

SimilarityVolume build_similarity(const EncodedVideo& video, const Tensor& text_rows,
                                  std::vector<int64_t> class_indices) {
    validate_similarity_inputs(video.patch_features, text_rows);
    ag::Tape tape;
    ag::NodePtr s = similarity_graph(tape.constant(video.patch_features), tape.constant(text_rows));
    SimilarityVolume out;
    out.values = s->value;
    if (class_indices.empty())
        for (int64_t c = 0; c < text_rows.dim(0); ++c) class_indices.push_back(c);
    if (static_cast<int64_t>(class_indices.size()) != text_rows.dim(0))
        throw ShapeError("class_indices size " + std::to_string(class_indices.size()) +
                         " does not match text rows " + std::to_string(text_rows.dim(0)));
    out.class_indices = std::move(class_indices);
    return out;
}

ag::NodePtr similarity_graph(const ag::NodePtr& patch_features, const ag::NodePtr& text_rows) {
    const Shape& fs = patch_features->value.shape();
    const int64_t T = fs[0], H = fs[1], W = fs[2], D = fs[3];
    const int64_t M = text_rows->value.dim(0);
    ag::NodePtr fn = normalize_rows(reshape(patch_features, {T * H * W, D}));
    ag::NodePtr tn = normalize_rows(text_rows);
    ag::NodePtr s = ag::matmul(fn, ag::permute(tn, {1, 0}));
    return ag::reshape(s, {T, H, W, M});
}

EmbeddedVolume embed_volume(const SimilarityVolume& sim, const EmbedConvParams& params) {
    ag::Tape tape;
    ag::NodePtr z = embed_volume_graph(tape.constant(sim.values), tape.constant(params.kernel),
                                       tape.constant(params.bias));
    return EmbeddedVolume{z->value, Stage::Z0};
}

ag::NodePtr embed_volume_graph(const ag::NodePtr& sim, const ag::NodePtr& kernel, const ag::NodePtr& bias) {
    const Shape& ss = sim->value.shape();
    if (ss.size() != 4) throw ShapeError("similarity volume must be [T,H,W,M], got " + shape_str(ss));
    const Shape& ks = kernel->value.shape();
    if (ks.size() != 4 || ks[0] != 7 || ks[1] != 7 || ks[2] != 1)
        throw ShapeError("embed kernel must be [7,7,1,d_f], got " + shape_str(ks));
    const int64_t T = ss[0], H = ss[1], W = ss[2], M = ss[3], df = ks[3];
    // One input channel per (t, c) map; the kernel is shared across frames
    // and classes.
    ag::NodePtr maps = ag::reshape(ag::permute(sim, {0, 3, 1, 2}), {T * M, 1, H, W});
    ag::NodePtr conv = ag::conv2d(maps, kernel, bias, 3);
    return ag::permute(ag::reshape(conv, {T, M, df, H, W}), {0, 3, 4, 1, 2});
}

} // namespace simva
