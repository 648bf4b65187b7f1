#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "medcorpus/error.hpp"

namespace medcorpus {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Random numbers
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. Distributions are implemented here because the std:: ones are
// implementation-defined, and artifacts must be byte-identical across
// toolchains.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound);

    /// Uniform integer in [lo, hi].
    std::int64_t between(std::int64_t lo, std::int64_t hi);

    /// Uniform real in [0, 1) with 53 random bits.
    double uniform();

    /// Standard normal via Box-Muller.
    double normal();

    bool chance(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; a bijective 64-bit mixer.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derive an independent stream seed from a parent seed and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept;

/// FNV-1a over raw bytes followed by mix64; stable across platforms.
std::uint64_t stable_hash(std::string_view bytes) noexcept;

/// Counter-based uniform in [-1, 1): deterministic function of (key, index).
double counter_uniform(std::uint64_t key, std::uint64_t index) noexcept;

// ---------------------------------------------------------------------------
// UTF-8
// ---------------------------------------------------------------------------

/// Decode UTF-8 into Unicode scalar values. Throws ValidationError on
/// malformed input.
std::vector<char32_t> utf8_decode(std::string_view text);

std::string utf8_encode(std::span<const char32_t> scalars);

/// Number of Unicode scalar values in a UTF-8 string.
std::size_t utf8_length(std::string_view text);

// ---------------------------------------------------------------------------
// Time (epoch seconds, UTC)
// ---------------------------------------------------------------------------

std::string format_rfc3339(std::int64_t epoch_seconds);

/// Accepts "YYYY-MM-DDTHH:MM:SS" followed by "Z" or a "+HH:MM"/"-HH:MM" offset.
std::int64_t parse_rfc3339(std::string_view text);

/// "December 31, 2022"
std::string format_long_date(std::int64_t epoch_seconds);

std::int64_t epoch_from_date(int year, unsigned month, unsigned day);

// ---------------------------------------------------------------------------
// Strings and files
// ---------------------------------------------------------------------------

std::string_view trim(std::string_view text) noexcept;

inline bool is_blank(std::string_view text) noexcept { return trim(text).empty(); }

std::string read_file(const std::filesystem::path& path);

/// Writes the whole file; throws IoError on failure.
void write_file(const std::filesystem::path& path, std::string_view contents);

/// Split into lines on '\n'; a trailing newline does not produce an empty line.
std::vector<std::string> split_lines(const std::string& contents);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

std::string sha256_file(const std::filesystem::path& path);

/// Serialize with sorted keys and no whitespace; one JSONL line.
inline std::string to_jsonl_line(const json& value) { return value.dump() + "\n"; }

// ---------------------------------------------------------------------------
// Strict JSON object reading: every key must be consumed, otherwise finish()
// throws naming the unknown keys.
// ---------------------------------------------------------------------------

class StrictObject {
public:
    StrictObject(const json& object, std::string context);
    /// Holds a reference, so temporaries are rejected.
    StrictObject(json&&, std::string) = delete;

    bool has(const std::string& key) const { return object_.contains(key); }

    const json& at(const std::string& key);

    template <typename T>
    T get(const std::string& key) {
        try {
            return at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(context_ + "." + key + ": " + e.what());
        }
    }

    template <typename T>
    T get_or(const std::string& key, T fallback) {
        if (!has(key)) {
            return fallback;
        }
        return get<T>(key);
    }

    const std::string& context() const { return context_; }

    void finish() const;

private:
    const json& object_;
    std::string context_;
    std::set<std::string> consumed_;
};

}  // namespace medcorpus
