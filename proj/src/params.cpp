#include "simva/params.hpp"

#include <cstring>

#include "simva/errors.hpp"

namespace simva {

DType dtype_from_name(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw FormatError("unknown dtype tag '" + s + "'");
}

Tensor& ParameterStore::add(const std::string& name, Tensor value, DType dtype) {
    if (contains(name)) throw ValidationError("parameter '" + name + "' registered twice");
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(value), dtype});
    return entries_.back().value;
}

Tensor& ParameterStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

const Tensor& ParameterStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return entries_[it->second];
}

int64_t ParameterStore::total_scalars() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

uint64_t ParameterStore::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix_bytes = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& e : entries_) {
        mix_bytes(e.name.data(), e.name.size());
        for (int64_t d : e.value.shape()) mix_bytes(&d, sizeof(d));
        mix_bytes(e.value.data(), static_cast<size_t>(e.value.size()) * sizeof(double));
    }
    return h;
}

} // namespace simva
