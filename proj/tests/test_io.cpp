#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "gest/io.hpp"
#include "gest/rng.hpp"

using namespace gest;

namespace {
std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("named-array container round trip") {
    Rng rng(1);
    NamedArrays a;
    a.meta["seed"] = 7;
    a.meta["note"] = "round-trip";
    a.add("poses", Tensor::randn({5, 3}, rng));
    a.add("beats", Tensor::randn({4}, rng));
    const std::string path = tmp_path("gest_io_rt.garr");
    a.save(path);
    NamedArrays b = NamedArrays::load(path);
    REQUIRE(b.arrays.size() == 2);
    CHECK(b.meta["seed"] == 7);
    CHECK(b.arrays[0].first == "poses");
    CHECK(b.arrays[0].second.shape == std::vector<size_t>{5, 3});
    CHECK(b.arrays[0].second.data == a.arrays[0].second.data);
    CHECK(b.require("beats").data == a.arrays[1].second.data);
    CHECK(b.find("missing") == nullptr);
    CHECK_THROWS(b.require("missing"));
    std::remove(path.c_str());
}

TEST_CASE("fingerprint is stable and tamper-sensitive") {
    Rng rng(2);
    NamedArrays a;
    a.add("w", Tensor::randn({8, 8}, rng));
    const uint64_t f0 = fingerprint(a);
    CHECK(f0 == fingerprint(a));
    a.arrays[0].second.data[17] += 1e-9;
    CHECK(f0 != fingerprint(a));
    CHECK(fingerprint_hex(a).size() == 16);
}

TEST_CASE("identical content saves to identical bytes") {
    Rng rng(3);
    NamedArrays a;
    a.meta["alpha"] = 1;
    a.meta["beta"] = "x";
    a.add("t", Tensor::randn({4, 4}, rng));
    const std::string p1 = tmp_path("gest_io_b1.garr");
    const std::string p2 = tmp_path("gest_io_b2.garr");
    a.save(p1);
    a.save(p2);
    CHECK(read_text_file(p1) == read_text_file(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("config parses typed keys with comments") {
    Config cfg = Config::parse_text(
        "# synth plan\n"
        "config_version = 1\n"
        "seed = 7\n"
        "svq.stage1.lr = 2.5e-3   # desk scale\n"
        "regions = upper_body:8,hands:16\n"
        "verbose = true\n");
    CHECK(cfg.get_int("seed", 0) == 7);
    CHECK(cfg.get_real("svq.stage1.lr", 0) == doctest::Approx(2.5e-3));
    CHECK(cfg.get_str("regions") == "upper_body:8,hands:16");
    CHECK(cfg.get_bool("verbose", false));
    CHECK(cfg.get_int("absent", 42) == 42);
    CHECK(!cfg.has("absent"));
}

TEST_CASE("config rejects malformed lines and bad versions") {
    CHECK_THROWS(Config::parse_text("not a key value line\n"));
    CHECK_THROWS(Config::parse_text("config_version = 99\n"));
    Config cfg = Config::parse_text("x = abc\n");
    CHECK_THROWS(cfg.get_real("x", 0));
    CHECK_THROWS(cfg.get_int("x", 0));
    CHECK_THROWS(cfg.get_bool("x", false));
}

TEST_CASE("environment variables override file values") {
    Config cfg = Config::parse_text("svq.stage1.lr = 1e-4\n");
    setenv("GESTURE_SVQ_STAGE1_LR", "9e-1", 1);
    CHECK(cfg.get_real("svq.stage1.lr", 0) == doctest::Approx(9e-1));
    unsetenv("GESTURE_SVQ_STAGE1_LR");
    CHECK(cfg.get_real("svq.stage1.lr", 0) == doctest::Approx(1e-4));
}

TEST_CASE("canonical config text is sorted and stable") {
    Config a = Config::parse_text("b = 2\na = 1\n");
    Config b = Config::parse_text("a = 1\nb = 2\n");
    CHECK(a.canonical_text() == b.canonical_text());
    CHECK(a.canonical_text() == "a = 1\nb = 2\n");
}
