#include <doctest.h>

#include <cmath>
#include <set>

#include "medcorpus/util.hpp"
#include "support.hpp"

using namespace medcorpus;

TEST_CASE("mt19937_64 engine produces the standard sequence") {
    // The 10000th output for the default seed is fixed by the C++ standard.
    Rng rng(5489);
    std::uint64_t value = 0;
    for (int i = 0; i < 10000; ++i) value = rng.next_u64();
    CHECK(value == 9981545732273789042ULL);
}

TEST_CASE("Rng draws are reproducible and in range") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        const auto x = a.below(7);
        CHECK(x == b.below(7));
        CHECK(x < 7);
        const double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const auto k = a.between(-3, 3);
        CHECK(k == b.between(-3, 3));
        CHECK(k >= -3);
        CHECK(k <= 3);
    }
}

TEST_CASE("Rng normal draws have roughly unit moments") {
    Rng rng(3);
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("shuffle is a permutation") {
    std::vector<int> v(100);
    for (int i = 0; i < 100; ++i) v[i] = i;
    Rng rng(9);
    rng.shuffle(v);
    CHECK(std::set<int>(v.begin(), v.end()).size() == 100);
    std::vector<int> w(100);
    for (int i = 0; i < 100; ++i) w[i] = i;
    CHECK(v != w);
}

TEST_CASE("derived seeds depend on the tag and the parent") {
    CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
    CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
    CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
    CHECK(stable_hash("abc") == stable_hash("abc"));
    CHECK(stable_hash("abc") != stable_hash("abd"));
}

TEST_CASE("counter_uniform is a pure function in [-1, 1)") {
    for (std::uint64_t i = 0; i < 1000; ++i) {
        const double u = counter_uniform(17, i);
        CHECK(u == counter_uniform(17, i));
        CHECK(u >= -1.0);
        CHECK(u < 1.0);
    }
    CHECK(counter_uniform(17, 0) != counter_uniform(18, 0));
}

TEST_CASE("UTF-8 decoding counts scalars and rejects malformed bytes") {
    CHECK(utf8_length("hello") == 5);
    CHECK(utf8_length("h\xC3\xA9llo") == 5);
    CHECK(utf8_length("\xE2\x9F\xA8STOP\xE2\x9F\xA9") == 6);
    CHECK(utf8_length("\xF0\x9F\x98\x80") == 1);
    const std::string text = "caf\xC3\xA9 \xE4\xB8\xAD\xE6\x96\x87";
    const auto scalars = utf8_decode(text);
    CHECK(utf8_encode(scalars) == text);
    CHECK_THROWS_AS(utf8_decode("\xC3"), ValidationError);
    CHECK_THROWS_AS(utf8_decode("\xFF"), ValidationError);
    CHECK_THROWS_AS(utf8_decode("\xC0\xAF"), ValidationError);
    CHECK_THROWS_AS(utf8_decode("\xED\xA0\x80"), ValidationError);
}

TEST_CASE("RFC 3339 round trip and offsets") {
    CHECK(format_rfc3339(0) == "1970-01-01T00:00:00Z");
    const auto t = epoch_from_date(2022, 12, 31);
    CHECK(format_rfc3339(t) == "2022-12-31T00:00:00Z");
    CHECK(parse_rfc3339("2022-12-31T00:00:00Z") == t);
    CHECK(parse_rfc3339("2022-12-31T08:00:00+08:00") == t);
    CHECK(parse_rfc3339("2022-12-30T19:00:00-05:00") == t);
    CHECK(format_long_date(t) == "December 31, 2022");
    CHECK(format_long_date(epoch_from_date(2024, 2, 29)) == "February 29, 2024");
    CHECK_THROWS_AS(parse_rfc3339("2022-12-31"), ValidationError);
    CHECK_THROWS_AS(parse_rfc3339("2022-13-01T00:00:00Z"), ValidationError);
}

TEST_CASE("trim and line splitting") {
    CHECK(trim("  a b \n") == "a b");
    CHECK(is_blank(" \t\n"));
    CHECK_FALSE(is_blank(" x "));
    CHECK(split_lines("a\nb\n") == std::vector<std::string>{"a", "b"});
    CHECK(split_lines("a\n\nb") == std::vector<std::string>{"a", "", "b"});
    CHECK(split_lines("").empty());
}

TEST_CASE("SHA-256 matches the published test vectors") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    testing_support::TempDir dir("util");
    write_file(dir / "f.txt", "abc");
    CHECK(read_file(dir / "f.txt") == "abc");
    CHECK(sha256_file(dir / "f.txt") == sha256_hex("abc"));
    CHECK_THROWS_AS(read_file(dir / "missing"), IoError);
}

TEST_CASE("StrictObject rejects unknown keys") {
    const json j = {{"a", 1}, {"b", "x"}, {"extra", true}};
    StrictObject obj(j, "cfg");
    CHECK(obj.get<int>("a") == 1);
    CHECK(obj.get<std::string>("b") == "x");
    CHECK(obj.get_or<int>("c", 5) == 5);
    CHECK_THROWS_WITH_AS(obj.finish(), doctest::Contains("extra"), ValidationError);

    const json ok = {{"a", 1}};
    StrictObject obj2(ok, "cfg");
    CHECK_THROWS_AS(obj2.get<std::string>("a"), ValidationError);
    CHECK_THROWS_AS(obj2.at("missing"), ValidationError);
}
