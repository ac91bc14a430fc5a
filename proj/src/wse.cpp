#include "simva/wse.hpp"

#include <sstream>

#include "simva/errors.hpp"

namespace simva {

ParameterStore wse_blend(const ParameterStore& base, const ParameterStore& tuned, double beta,
                         const std::string& prefix) {
    if (beta < 0.0 || beta > 1.0)
        throw ValidationError("wse: beta must be in [0, 1], got " + std::to_string(beta));

    std::vector<std::string> missing, extra, shape_mismatch;
    for (const auto& e : base.entries())
        if (!tuned.contains(e.name))
            missing.push_back(e.name);
        else if (!tuned.at(e.name).same_shape(e.value))
            shape_mismatch.push_back(e.name);
    for (const auto& e : tuned.entries())
        if (!base.contains(e.name)) extra.push_back(e.name);
    if (!missing.empty() || !extra.empty() || !shape_mismatch.empty()) {
        std::ostringstream os;
        os << "wse: parameter stores differ;";
        auto list = [&os](const char* what, const std::vector<std::string>& v) {
            if (v.empty()) return;
            os << " " << what << ": [";
            for (size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
            os << "]";
        };
        list("only in base", missing);
        list("only in tuned", extra);
        list("shape mismatch", shape_mismatch);
        throw StructureError(os.str());
    }

    ParameterStore out;
    for (const auto& e : base.entries()) {
        const Tensor& a = e.value;
        const Tensor& b = tuned.at(e.name);
        bool apply = prefix.empty() || e.name.rfind(prefix, 0) == 0;
        Tensor v(a.shape());
        if (!apply || beta == 1.0) {
            v = b;
        } else if (beta == 0.0) {
            v = a;
        } else {
            for (int64_t i = 0; i < a.size(); ++i) v[i] = (1.0 - beta) * a[i] + beta * b[i];
        }
        out.add(e.name, std::move(v), e.dtype);
    }
    out.metadata = tuned.metadata;
    out.metadata["wse.beta"] = std::to_string(beta);
    if (!prefix.empty()) out.metadata["wse.prefix"] = prefix;
    out.metadata["wse.base_hash"] = std::to_string(base.content_hash());
    out.metadata["wse.tuned_hash"] = std::to_string(tuned.content_hash());
    return out;
}

} // namespace simva
