#include "simva/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "simva/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "container serialization assumes a little-endian host");

namespace simva {

namespace {

constexpr char kMagic[4] = {'S', 'V', 'C', 'K'};

void write_bytes(std::ofstream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void write_pod(std::ofstream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return data;
}

} // namespace

const Container::ArrayEntry* Container::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

const Container::ArrayEntry& Container::require(const std::string& name) const {
    const ArrayEntry* a = find(name);
    if (!a) {
        std::string have;
        for (const auto& e : arrays) have += (have.empty() ? "" : ", ") + e.name;
        throw FormatError("container has no array '" + name + "' (available: " + have + ")");
    }
    return *a;
}

void save_container(const Container& c, const std::string& path) {
    nlohmann::ordered_json manifest;
    manifest["format"] = "svck";
    manifest["version"] = Container::kVersion;
    manifest["kind"] = c.kind;
    manifest["config"] = c.config.is_null() ? nlohmann::ordered_json() : c.config;
    manifest["metadata"] = c.metadata;
    nlohmann::ordered_json arrays = nlohmann::ordered_json::array();
    int64_t offset = 0;
    for (const auto& a : c.arrays) {
        int64_t byte_length = a.data.size() * dtype_size(a.dtype);
        arrays.push_back({{"name", a.name},
                          {"shape", a.data.shape()},
                          {"dtype", dtype_name(a.dtype)},
                          {"offset", offset},
                          {"byte_length", byte_length}});
        offset += byte_length;
    }
    manifest["arrays"] = std::move(arrays);
    std::string mtext = manifest.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write '" + path + "'");
    write_bytes(os, kMagic, 4);
    write_pod<uint32_t>(os, Container::kVersion);
    write_pod<uint64_t>(os, mtext.size());
    write_bytes(os, mtext.data(), mtext.size());
    write_pod<uint64_t>(os, static_cast<uint64_t>(offset));
    for (const auto& a : c.arrays) {
        if (a.dtype == DType::f64) {
            write_bytes(os, a.data.data(), static_cast<size_t>(a.data.size()) * 8);
        } else {
            std::vector<float> f(static_cast<size_t>(a.data.size()));
            for (int64_t i = 0; i < a.data.size(); ++i) f[static_cast<size_t>(i)] = static_cast<float>(a.data[i]);
            write_bytes(os, f.data(), f.size() * 4);
        }
    }
    if (!os) throw FormatError("write failed for '" + path + "'");
}

Container load_container(const std::string& path) {
    std::string raw = read_file(path);
    auto need = [&](size_t at, size_t n, const char* what) {
        if (at + n > raw.size())
            throw FormatError("container truncated reading " + std::string(what) + ": need " +
                              std::to_string(n) + " bytes at offset " + std::to_string(at) + ", file has " +
                              std::to_string(raw.size()));
    };
    need(0, 4, "magic");
    if (std::memcmp(raw.data(), kMagic, 4) != 0) throw FormatError("bad magic in '" + path + "'");
    need(4, 4, "version");
    uint32_t version;
    std::memcpy(&version, raw.data() + 4, 4);
    if (version != Container::kVersion)
        throw FormatError("unsupported container version " + std::to_string(version));
    need(8, 8, "manifest length");
    uint64_t mlen;
    std::memcpy(&mlen, raw.data() + 8, 8);
    need(16, mlen, "manifest");
    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(raw.substr(16, mlen));
    } catch (const std::exception& e) {
        throw FormatError(std::string("manifest parse error: ") + e.what());
    }
    size_t blob_hdr = 16 + mlen;
    need(blob_hdr, 8, "blob length");
    uint64_t blob_len;
    std::memcpy(&blob_len, raw.data() + blob_hdr, 8);
    size_t blob_start = blob_hdr + 8;
    need(blob_start, blob_len, "blob");

    Container c;
    c.kind = manifest.value("kind", "");
    if (manifest.contains("config") && !manifest["config"].is_null()) c.config = manifest["config"];
    if (manifest.contains("metadata"))
        for (auto& [k, v] : manifest["metadata"].items()) c.metadata[k] = v.get<std::string>();

    int64_t expect_offset = 0;
    for (const auto& ja : manifest.at("arrays")) {
        Container::ArrayEntry a;
        a.name = ja.at("name").get<std::string>();
        a.dtype = dtype_from_name(ja.at("dtype").get<std::string>());
        Shape shape = ja.at("shape").get<Shape>();
        int64_t offset = ja.at("offset").get<int64_t>();
        int64_t byte_length = ja.at("byte_length").get<int64_t>();
        int64_t n = shape_numel(shape);
        if (byte_length != n * dtype_size(a.dtype))
            throw FormatError("array '" + a.name + "': byte_length " + std::to_string(byte_length) +
                              " does not match shape " + shape_str(shape) + " of dtype " +
                              dtype_name(a.dtype));
        if (offset != expect_offset)
            throw FormatError("array '" + a.name + "': offset " + std::to_string(offset) +
                              " is not contiguous (expected " + std::to_string(expect_offset) + ")");
        expect_offset += byte_length;
        if (static_cast<uint64_t>(offset + byte_length) > blob_len)
            throw FormatError("array '" + a.name + "': blob truncated, needs bytes [" +
                              std::to_string(offset) + ", " + std::to_string(offset + byte_length) +
                              ") but blob has " + std::to_string(blob_len));
        const char* src = raw.data() + blob_start + offset;
        Tensor t(shape);
        if (a.dtype == DType::f64) {
            std::memcpy(t.data(), src, static_cast<size_t>(byte_length));
        } else {
            for (int64_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, src + i * 4, 4);
                t[i] = static_cast<double>(f);
            }
        }
        a.data = std::move(t);
        c.arrays.push_back(std::move(a));
    }
    if (static_cast<uint64_t>(expect_offset) != blob_len)
        throw FormatError("blob length " + std::to_string(blob_len) + " does not match manifest total " +
                          std::to_string(expect_offset));
    return c;
}

Container to_container(const ParameterStore& store, nlohmann::ordered_json config) {
    Container c;
    c.kind = "checkpoint";
    c.config = std::move(config);
    c.metadata = store.metadata;
    for (const auto& e : store.entries()) c.arrays.push_back({e.name, e.dtype, e.value});
    return c;
}

ParameterStore store_from_container(const Container& c) {
    ParameterStore s;
    for (const auto& a : c.arrays) s.add(a.name, a.data, a.dtype);
    s.metadata = c.metadata;
    return s;
}

} // namespace simva
