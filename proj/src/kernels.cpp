#include "gest/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace gest::kern {

const Backend* avx2_backend();  // defined in kernels_avx2.cpp (null off x86)

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const Backend* resolve(const std::string& name) {
    if (name == "scalar") return &scalar_backend();
    if (name == "avx2") {
        const Backend* b = avx2_backend();
        if (!b || !cpu_has_avx2()) return nullptr;
        return b;
    }
    if (name == "auto" || name.empty()) {
        if (const Backend* b = avx2_backend(); b && cpu_has_avx2()) return b;
        return &scalar_backend();
    }
    return nullptr;
}

const Backend* g_active = nullptr;

const Backend* init_from_env() {
    const char* env = std::getenv("GESTURE_KERNELS");
    const Backend* b = resolve(env ? env : "auto");
    if (!b) b = &scalar_backend();  // unknown/unsupported request falls back
    return b;
}

}  // namespace

const Backend& active() {
    if (!g_active) g_active = init_from_env();
    return *g_active;
}

void set_backend(const std::string& name) {
    const Backend* b = resolve(name);
    if (!b) throw std::runtime_error("kernel backend unavailable: " + name);
    g_active = b;
}

std::vector<std::string> available() {
    std::vector<std::string> out = {"scalar"};
    if (const Backend* b = avx2_backend(); b && cpu_has_avx2()) out.push_back(b->name);
    return out;
}

}  // namespace gest::kern
