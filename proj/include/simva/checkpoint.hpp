#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "simva/params.hpp"
#include "simva/tensor.hpp"

namespace simva {

// Serialized container shared by checkpoints, feature files and array dumps:
//
//   "SVCK" | u32 version | u64 manifest_len | manifest JSON (UTF-8)
//          | u64 blob_len | blob
//
// The manifest lists arrays in blob order with contiguous offsets; the blob is
// raw little-endian scalar data concatenated in that order.
struct Container {
    static constexpr uint32_t kVersion = 1;

    struct ArrayEntry {
        std::string name;
        DType dtype = DType::f64;
        Tensor data; // held in 64-bit regardless of on-disk dtype
    };

    std::string kind; // "checkpoint" | "encoded_video" | "text_embedding_set" | "array_dump"
    nlohmann::ordered_json config; // embedded ModelConfig/TrainConfig, may be null
    std::map<std::string, std::string> metadata;
    std::vector<ArrayEntry> arrays;

    const ArrayEntry* find(const std::string& name) const;
    const ArrayEntry& require(const std::string& name) const;
};

void save_container(const Container& c, const std::string& path);
Container load_container(const std::string& path);

// ParameterStore <-> container helpers.
Container to_container(const ParameterStore& store, nlohmann::ordered_json config);
ParameterStore store_from_container(const Container& c);

} // namespace simva
