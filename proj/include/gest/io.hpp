#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gest/tensor.hpp"

namespace gest {

// Container file: JSON manifest + named little-endian float64 arrays.
//
//   bytes 0..5   magic "GARR1\n"
//   bytes 6..13  u64 little-endian manifest length M
//   M bytes      manifest JSON: {"format":"garr.v1","meta":{...},
//                 "arrays":[{"name":..,"dtype":"f64","shape":[..]},..]}
//   payload      arrays concatenated in manifest order, raw little-endian f64
//
// Used for synthetic sessions, checkpoints, pose streams and stream-session
// snapshots. Manifest key order is sorted (nlohmann default), so equal
// content means equal bytes.
struct NamedArrays {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> arrays;

    void add(std::string name, Tensor t) { arrays.emplace_back(std::move(name), std::move(t)); }
    const Tensor* find(const std::string& name) const;
    const Tensor& require(const std::string& name) const;

    void save(const std::string& path) const;
    static NamedArrays load(const std::string& path);
};

// FNV-1a over the manifest-ordered array names and raw payload bytes.
// Integrity / lineage checks, not cryptography.
uint64_t fingerprint(const NamedArrays& bundle);
std::string fingerprint_hex(const NamedArrays& bundle);
uint64_t fnv1a(const void* bytes, size_t n, uint64_t seed = 0xcbf29ce484222325ull);

// Flat key-value config: `key = value` lines, '#' comments. Environment
// variables override file values: key "svq.stage1.lr" reads
// GESTURE_SVQ_STAGE1_LR. `config_version` must be 1 when present.
class Config {
public:
    Config() = default;
    static Config parse_file(const std::string& path);
    static Config parse_text(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback = {}) const;
    double get_real(const std::string& key, double fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value);
    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
    std::string canonical_text() const;  // sorted, for hashing into manifests

private:
    std::optional<std::string> lookup(const std::string& key) const;
    std::vector<std::pair<std::string, std::string>> entries_;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace gest
