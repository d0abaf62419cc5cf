#include "gest/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gest {

static_assert(std::endian::native == std::endian::little,
              "container payload is little-endian; big-endian hosts need byte swaps");

namespace {
constexpr char kMagic[6] = {'G', 'A', 'R', 'R', '1', '\n'};
}

const Tensor* NamedArrays::find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

const Tensor& NamedArrays::require(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw std::runtime_error("container missing array: " + name);
    return *t;
}

void NamedArrays::save(const std::string& path) const {
    nlohmann::json manifest;
    manifest["format"] = "garr.v1";
    manifest["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [name, t] : arrays) {
        nlohmann::json e;
        e["name"] = name;
        e["dtype"] = "f64";
        e["shape"] = t.shape;
        arr.push_back(e);
    }
    manifest["arrays"] = arr;
    const std::string m = manifest.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write(kMagic, sizeof(kMagic));
    const uint64_t mlen = m.size();
    os.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    os.write(m.data(), std::streamsize(m.size()));
    for (const auto& [name, t] : arrays)
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 std::streamsize(t.data.size() * sizeof(double)));
    if (!os) throw std::runtime_error("write failed: " + path);
}

NamedArrays NamedArrays::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[sizeof(kMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("bad container magic: " + path);
    uint64_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string m(mlen, '\0');
    is.read(m.data(), std::streamsize(mlen));
    if (!is) throw std::runtime_error("truncated manifest: " + path);
    nlohmann::json manifest = nlohmann::json::parse(m);
    if (manifest.value("format", "") != "garr.v1")
        throw std::runtime_error("unsupported container format: " + path);

    NamedArrays out;
    out.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& e : manifest.at("arrays")) {
        std::string name = e.at("name").get<std::string>();
        if (e.value("dtype", "f64") != "f64")
            throw std::runtime_error("unsupported dtype in " + path);
        std::vector<size_t> shape = e.at("shape").get<std::vector<size_t>>();
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                std::streamsize(t.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("truncated payload: " + path);
        out.arrays.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

uint64_t fnv1a(const void* bytes, size_t n, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fingerprint(const NamedArrays& bundle) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : bundle.arrays) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(t.shape.data(), t.shape.size() * sizeof(size_t), h);
        h = fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
    }
    return h;
}

std::string fingerprint_hex(const NamedArrays& bundle) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)fingerprint(bundle));
    return buf;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {
std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace((unsigned char)s[a])) ++a;
    while (b > a && std::isspace((unsigned char)s[b - 1])) --b;
    return s.substr(a, b - a);
}

std::string env_key(const std::string& key) {
    std::string out = "GESTURE_";
    for (char c : key) out += (c == '.' || c == '-') ? '_' : char(std::toupper((unsigned char)c));
    return out;
}
}  // namespace

Config Config::parse_text(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config parse error at line " + std::to_string(lineno) +
                                     ": expected key = value");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    if (cfg.has("config_version") && cfg.get_int("config_version", 1) != 1)
        throw std::runtime_error("unsupported config_version");
    return cfg;
}

Config Config::parse_file(const std::string& path) { return parse_text(read_text_file(path)); }

void Config::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

std::optional<std::string> Config::lookup(const std::string& key) const {
    if (const char* env = std::getenv(env_key(key).c_str())) return std::string(env);
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    return std::nullopt;
}

bool Config::has(const std::string& key) const { return lookup(key).has_value(); }

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
    return lookup(key).value_or(fallback);
}

double Config::get_real(const std::string& key, double fallback) const {
    auto v = lookup(key);
    if (!v) return fallback;
    try {
        return std::stod(*v);
    } catch (...) {
        throw std::runtime_error("config: key '" + key + "' is not a number: " + *v);
    }
}

int64_t Config::get_int(const std::string& key, int64_t fallback) const {
    auto v = lookup(key);
    if (!v) return fallback;
    try {
        return std::stoll(*v);
    } catch (...) {
        throw std::runtime_error("config: key '" + key + "' is not an integer: " + *v);
    }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    auto v = lookup(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw std::runtime_error("config: key '" + key + "' is not a bool: " + *v);
}

std::string Config::canonical_text() const {
    auto sorted = entries_;
    std::sort(sorted.begin(), sorted.end());
    std::string out;
    for (const auto& [k, v] : sorted) {
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    }
    return out;
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace gest
