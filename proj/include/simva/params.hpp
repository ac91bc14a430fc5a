#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "simva/tensor.hpp"

namespace simva {

enum class DType { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline int64_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }
DType dtype_from_name(const std::string& s);

// Ordered map of named learnable arrays. Insertion order is the canonical
// serialization order; shapes are immutable once registered.
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        DType dtype = DType::f64;
    };

    Tensor& add(const std::string& name, Tensor value, DType dtype = DType::f64);
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    const Entry& entry(const std::string& name) const;

    size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    int64_t total_scalars() const;

    // Free-form bookkeeping (config hash, step count, WSE provenance).
    std::map<std::string, std::string> metadata;

    // FNV-1a over names, shapes and little-endian payload bytes.
    uint64_t content_hash() const;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

} // namespace simva
