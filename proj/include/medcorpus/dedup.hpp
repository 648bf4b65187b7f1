#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "medcorpus/corpus.hpp"

namespace medcorpus::dedup {

/// Modulus of the universal hash family, the Mersenne prime 2^61 - 1.
inline constexpr std::uint64_t mersenne61 = (std::uint64_t{1} << 61) - 1;

struct LshParams {
    int bands = 256;
    int rows = 16;
    /// Signature length; must equal bands * rows.
    int num_perm = 4096;
    double threshold = 0.85;
    int ngram = 5;
    std::uint64_t seed = 1;

    /// Throws ValidationError when bands * rows != num_perm or the threshold
    /// is outside (0, 1).
    void validate() const;
};

json to_json(const LshParams& params);
LshParams params_from_json(const json& j);

/// Set of 64-bit hashed character n-grams, sorted and unique.
struct ShingleSet {
    int n = 5;
    std::vector<std::uint64_t> shingles;
};

struct MinHashSignature {
    std::vector<std::uint64_t> values;

    bool operator==(const MinHashSignature&) const = default;
};

/// All contiguous n-scalar windows of `text`, hashed. Throws TooFewShingles
/// when the text has fewer than n Unicode scalars.
ShingleSet shingle(std::string_view text, int n = 5);

/// Holds the (a_i, b_i) coefficients of h_i(x) = (a_i x + b_i) mod p,
/// drawn from params.seed.
class MinHasher {
public:
    explicit MinHasher(const LshParams& params);

    MinHashSignature signature(const ShingleSet& shingles) const;

    /// h_i(x) for a single shingle hash.
    std::uint64_t permute(std::size_t i, std::uint64_t x) const;

    std::size_t size() const { return a_.size(); }

private:
    std::vector<std::uint64_t> a_;
    std::vector<std::uint64_t> b_;
};

MinHashSignature minhash(const ShingleSet& shingles, const LshParams& params);

/// Fraction of equal components. Throws on length mismatch.
double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b);

struct BandKey {
    std::uint32_t band = 0;
    std::uint64_t hash = 0;

    bool operator==(const BandKey&) const = default;
};

/// One key per band, hashing that band's `rows` contiguous components.
std::vector<BandKey> band_keys(const MinHashSignature& sig, const LshParams& params);

/// Per-band buckets of document indices. Partial indexes built over disjoint
/// document ranges can be merged; candidate generation is independent of
/// insertion and merge order.
class LshIndex {
public:
    explicit LshIndex(int bands);

    void insert(std::uint32_t doc, const std::vector<BandKey>& keys);
    void merge(const LshIndex& other);

    /// Unique (i, j) pairs with i < j sharing at least one bucket, sorted.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> candidate_pairs() const;

private:
    std::vector<std::unordered_map<std::uint64_t, std::vector<std::uint32_t>>> buckets_;
};

struct TextItem {
    std::string id;
    std::string text;
    std::int64_t created_at = 0;
};

std::vector<TextItem> items_from_records(const std::vector<ClinicalRecord>& records);

/// Signatures for all items, computed in parallel; index-aligned with items.
std::vector<MinHashSignature> compute_signatures(const std::vector<TextItem>& items, const LshParams& params);

/// Connected components (size >= 2) of the graph joining items that share a
/// band key and whose estimated Jaccard reaches the threshold. Members and
/// groups are sorted by id.
std::vector<std::vector<std::string>> cluster_duplicates(const std::vector<TextItem>& items,
                                                         const LshParams& params);

struct DedupReport {
    std::vector<std::string> kept_ids;
    std::vector<std::string> dropped_ids;
    std::vector<std::vector<std::string>> groups;
    std::vector<std::string> representatives;
    /// Items removed because they have fewer than `ngram` units (also in dropped_ids).
    std::vector<std::string> too_short_ids;
    LshParams params;

    bool operator==(const DedupReport& other) const {
        return kept_ids == other.kept_ids && dropped_ids == other.dropped_ids && groups == other.groups &&
               representatives == other.representatives && too_short_ids == other.too_short_ids;
    }
};

/// Keeps one item per duplicate group: earliest created_at, ties broken by
/// the smallest id.
DedupReport dedup_corpus(const std::vector<TextItem>& items, const LshParams& params);

json to_json(const DedupReport& report);
DedupReport report_from_json(const json& j);

}  // namespace medcorpus::dedup
