#include <catch2/catch_amalgamated.hpp>

#include <vdrl/config.hpp>

using namespace vdrl;

TEST_CASE("config parses keys, comments, and whitespace", "[config]") {
    KeyValueConfig cfg = KeyValueConfig::parse(
        "# training setup\n"
        "slowae.k = 7\n"
        "slowae.lr= 0.001  # inline comment\n"
        "  controller.target_rate_hz =20 \n"
        "\n"
        "data.classes = 4\n");
    REQUIRE(cfg.get_int("slowae.k", 0) == 7);
    REQUIRE(cfg.get_double("slowae.lr", 0) == 0.001);
    REQUIRE(cfg.get_double("controller.target_rate_hz", 0) == 20.0);
    REQUIRE(cfg.get_int("data.classes", 0) == 4);
    REQUIRE_NOTHROW(cfg.reject_unconsumed());
}

TEST_CASE("config falls back to defaults for missing keys", "[config]") {
    KeyValueConfig cfg = KeyValueConfig::parse("a = 1\n");
    REQUIRE(cfg.get_int("missing", 42) == 42);
    REQUIRE(cfg.get_bool("missing.flag", true));
    REQUIRE(cfg.get_string("missing.name", "x") == "x");
    REQUIRE(cfg.has("a"));
    REQUIRE_FALSE(cfg.has("missing"));
}

TEST_CASE("config rejects malformed input", "[config]") {
    REQUIRE_THROWS_AS(KeyValueConfig::parse("just some words\n"), ConfigError);
    REQUIRE_THROWS_AS(KeyValueConfig::parse("= value\n"), ConfigError);
    REQUIRE_THROWS_AS(KeyValueConfig::parse("a = 1\na = 2\n"), ConfigError);

    KeyValueConfig cfg = KeyValueConfig::parse("x = notanumber\nflag = maybe\n");
    REQUIRE_THROWS_AS(cfg.get_int("x", 0), ConfigError);
    REQUIRE_THROWS_AS(cfg.get_double("x", 0), ConfigError);
    REQUIRE_THROWS_AS(cfg.get_bool("flag", false), ConfigError);
}

TEST_CASE("unconsumed keys are reported as unknown", "[config]") {
    KeyValueConfig cfg = KeyValueConfig::parse("known = 1\ntypo.key = 2\n");
    REQUIRE(cfg.get_int("known", 0) == 1);
    REQUIRE_THROWS_AS(cfg.reject_unconsumed(), ConfigError);
}

TEST_CASE("booleans accept true/false and 1/0", "[config]") {
    KeyValueConfig cfg = KeyValueConfig::parse("a = true\nb = 0\nc = false\nd = 1\n");
    REQUIRE(cfg.get_bool("a", false));
    REQUIRE_FALSE(cfg.get_bool("b", true));
    REQUIRE_FALSE(cfg.get_bool("c", true));
    REQUIRE(cfg.get_bool("d", false));
}

TEST_CASE("serialize emits parseable text", "[config]") {
    KeyValueConfig cfg;
    cfg.set("b.key", "2.5");
    cfg.set("a.key", "hello");
    KeyValueConfig back = KeyValueConfig::parse(cfg.serialize());
    REQUIRE(back.get_string("a.key", "") == "hello");
    REQUIRE(back.get_double("b.key", 0) == 2.5);
}
