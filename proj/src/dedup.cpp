#include "medcorpus/dedup.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <thread>

namespace medcorpus::dedup {

namespace {

std::uint64_t mulmod61(std::uint64_t a, std::uint64_t b) {
    const unsigned __int128 product = static_cast<unsigned __int128>(a) * b;
    std::uint64_t r = (static_cast<std::uint64_t>(product) & mersenne61) + static_cast<std::uint64_t>(product >> 61);
    if (r >= mersenne61) r -= mersenne61;
    return r;
}

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent_[std::max(a, b)] = std::min(a, b);
    }

private:
    std::vector<std::size_t> parent_;
};

}  // namespace

void LshParams::validate() const {
    if (bands < 1 || rows < 1) {
        throw ValidationError("lsh: bands and rows must be positive");
    }
    if (static_cast<long long>(bands) * rows != num_perm) {
        throw ValidationError("lsh: bands * rows (" + std::to_string(static_cast<long long>(bands) * rows) +
                              ") must equal the signature length (" + std::to_string(num_perm) + ")");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ValidationError("lsh: threshold must be in (0, 1)");
    }
    if (ngram < 1) {
        throw ValidationError("lsh: ngram must be >= 1");
    }
}

json to_json(const LshParams& p) {
    return {{"bands", p.bands},         {"rows", p.rows}, {"num_perm", p.num_perm},
            {"threshold", p.threshold}, {"ngram", p.ngram}, {"seed", p.seed}};
}

LshParams params_from_json(const json& j) {
    StrictObject obj(j, "dedup");
    LshParams p;
    p.bands = obj.get_or<int>("bands", p.bands);
    p.rows = obj.get_or<int>("rows", p.rows);
    p.num_perm = obj.get_or<int>("num_perm", p.num_perm);
    p.threshold = obj.get_or<double>("threshold", p.threshold);
    p.ngram = obj.get_or<int>("ngram", p.ngram);
    p.seed = obj.get_or<std::uint64_t>("seed", p.seed);
    obj.finish();
    p.validate();
    return p;
}

ShingleSet shingle(std::string_view text, int n) {
    if (n < 1) {
        throw ValidationError("shingle: n must be >= 1");
    }
    const auto scalars = utf8_decode(text);
    if (scalars.size() < static_cast<std::size_t>(n)) {
        throw TooFewShingles("text has " + std::to_string(scalars.size()) + " units, fewer than n = " +
                             std::to_string(n));
    }
    ShingleSet out;
    out.n = n;
    out.shingles.reserve(scalars.size() - n + 1);
    for (std::size_t i = 0; i + n <= scalars.size(); ++i) {
        const std::string gram = utf8_encode(std::span<const char32_t>(scalars.data() + i, static_cast<std::size_t>(n)));
        out.shingles.push_back(stable_hash(gram));
    }
    std::sort(out.shingles.begin(), out.shingles.end());
    out.shingles.erase(std::unique(out.shingles.begin(), out.shingles.end()), out.shingles.end());
    return out;
}

MinHasher::MinHasher(const LshParams& params) {
    params.validate();
    Rng rng(derive_seed(params.seed, "minhash"));
    a_.resize(params.num_perm);
    b_.resize(params.num_perm);
    for (int i = 0; i < params.num_perm; ++i) {
        a_[i] = 1 + rng.below(mersenne61 - 1);
        b_[i] = rng.below(mersenne61);
    }
}

std::uint64_t MinHasher::permute(std::size_t i, std::uint64_t x) const {
    std::uint64_t r = mulmod61(a_[i], x % mersenne61) + b_[i];
    if (r >= mersenne61) r -= mersenne61;
    return r;
}

MinHashSignature MinHasher::signature(const ShingleSet& shingles) const {
    MinHashSignature sig;
    sig.values.assign(a_.size(), mersenne61);
    for (std::uint64_t raw : shingles.shingles) {
        const std::uint64_t x = raw % mersenne61;
        for (std::size_t i = 0; i < a_.size(); ++i) {
            std::uint64_t r = mulmod61(a_[i], x) + b_[i];
            if (r >= mersenne61) r -= mersenne61;
            sig.values[i] = std::min(sig.values[i], r);
        }
    }
    return sig;
}

MinHashSignature minhash(const ShingleSet& shingles, const LshParams& params) {
    return MinHasher(params).signature(shingles);
}

double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b) {
    if (a.values.size() != b.values.size() || a.values.empty()) {
        throw ValidationError("estimate_jaccard: signature lengths differ (" + std::to_string(a.values.size()) +
                              " vs " + std::to_string(b.values.size()) + ")");
    }
    std::size_t equal = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        equal += a.values[i] == b.values[i];
    }
    return static_cast<double>(equal) / static_cast<double>(a.values.size());
}

std::vector<BandKey> band_keys(const MinHashSignature& sig, const LshParams& params) {
    if (static_cast<std::size_t>(params.bands) * params.rows != sig.values.size()) {
        throw ValidationError("band_keys: bands * rows must equal the signature length");
    }
    std::vector<BandKey> keys(params.bands);
    for (int band = 0; band < params.bands; ++band) {
        std::uint64_t h = mix64(static_cast<std::uint64_t>(band));
        for (int r = 0; r < params.rows; ++r) {
            h = mix64(h ^ sig.values[static_cast<std::size_t>(band) * params.rows + r]);
        }
        keys[band] = {static_cast<std::uint32_t>(band), h};
    }
    return keys;
}

// ---------------------------------------------------------------------------

LshIndex::LshIndex(int bands) : buckets_(bands) {}

void LshIndex::insert(std::uint32_t doc, const std::vector<BandKey>& keys) {
    for (const auto& key : keys) {
        if (key.band >= buckets_.size()) {
            throw ValidationError("LshIndex: band index out of range");
        }
        buckets_[key.band][key.hash].push_back(doc);
    }
}

void LshIndex::merge(const LshIndex& other) {
    if (other.buckets_.size() != buckets_.size()) {
        throw ValidationError("LshIndex::merge: band counts differ");
    }
    for (std::size_t band = 0; band < buckets_.size(); ++band) {
        for (const auto& [hash, docs] : other.buckets_[band]) {
            auto& target = buckets_[band][hash];
            target.insert(target.end(), docs.begin(), docs.end());
        }
    }
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> LshIndex::candidate_pairs() const {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    for (const auto& band : buckets_) {
        for (const auto& [hash, docs] : band) {
            if (docs.size() < 2) continue;
            std::vector<std::uint32_t> sorted = docs;
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t i = 0; i < sorted.size(); ++i) {
                for (std::size_t j = i + 1; j < sorted.size(); ++j) {
                    if (sorted[i] != sorted[j]) pairs.emplace_back(sorted[i], sorted[j]);
                }
            }
        }
    }
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    return pairs;
}

// ---------------------------------------------------------------------------

std::vector<TextItem> items_from_records(const std::vector<ClinicalRecord>& records) {
    std::vector<TextItem> items;
    items.reserve(records.size());
    for (const auto& r : records) {
        items.push_back({r.record_id, record_text(r), r.created_at});
    }
    return items;
}

std::vector<MinHashSignature> compute_signatures(const std::vector<TextItem>& items, const LshParams& params) {
    const MinHasher hasher(params);
    std::vector<MinHashSignature> out(items.size());
    const std::size_t workers =
        std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), items.size() / 16 + 1));
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            out[i] = hasher.signature(shingle(items[i].text, params.ngram));
        }
    };
    if (workers == 1) {
        work(0, items.size());
        return out;
    }
    {
        std::vector<std::jthread> threads;
        const std::size_t chunk = (items.size() + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t begin = w * chunk;
            const std::size_t end = std::min(items.size(), begin + chunk);
            if (begin < end) threads.emplace_back(work, begin, end);
        }
    }
    return out;
}

std::vector<std::vector<std::string>> cluster_duplicates(const std::vector<TextItem>& input,
                                                         const LshParams& params) {
    params.validate();
    // Work in id order so results do not depend on input order.
    std::vector<TextItem> items = input;
    std::sort(items.begin(), items.end(), [](const TextItem& a, const TextItem& b) { return a.id < b.id; });

    const auto signatures = compute_signatures(items, params);
    LshIndex index(params.bands);
    for (std::size_t i = 0; i < items.size(); ++i) {
        index.insert(static_cast<std::uint32_t>(i), band_keys(signatures[i], params));
    }

    DisjointSets sets(items.size());
    for (const auto& [i, j] : index.candidate_pairs()) {
        if (estimate_jaccard(signatures[i], signatures[j]) >= params.threshold) {
            sets.unite(i, j);
        }
    }
    std::map<std::size_t, std::vector<std::string>> components;
    for (std::size_t i = 0; i < items.size(); ++i) {
        components[sets.find(i)].push_back(items[i].id);
    }
    std::vector<std::vector<std::string>> groups;
    for (auto& [root, members] : components) {
        if (members.size() >= 2) groups.push_back(std::move(members));
    }
    std::sort(groups.begin(), groups.end());
    return groups;
}

DedupReport dedup_corpus(const std::vector<TextItem>& items, const LshParams& params) {
    params.validate();
    DedupReport report;
    report.params = params;

    std::vector<TextItem> eligible;
    std::map<std::string, std::int64_t> created;
    for (const auto& item : items) {
        if (utf8_length(item.text) < static_cast<std::size_t>(params.ngram)) {
            report.too_short_ids.push_back(item.id);
        } else {
            eligible.push_back(item);
            created[item.id] = item.created_at;
        }
    }
    report.groups = cluster_duplicates(eligible, params);

    std::vector<std::string> dropped = report.too_short_ids;
    for (const auto& group : report.groups) {
        const auto rep = *std::min_element(group.begin(), group.end(), [&](const std::string& a, const std::string& b) {
            return std::pair(created[a], a) < std::pair(created[b], b);
        });
        report.representatives.push_back(rep);
        for (const auto& id : group) {
            if (id != rep) dropped.push_back(id);
        }
    }
    std::sort(dropped.begin(), dropped.end());
    std::sort(report.too_short_ids.begin(), report.too_short_ids.end());
    for (const auto& item : items) {
        if (!std::binary_search(dropped.begin(), dropped.end(), item.id)) {
            report.kept_ids.push_back(item.id);
        }
    }
    std::sort(report.kept_ids.begin(), report.kept_ids.end());
    report.dropped_ids = std::move(dropped);
    return report;
}

json to_json(const DedupReport& r) {
    return {{"kept_ids", r.kept_ids},
            {"dropped_ids", r.dropped_ids},
            {"groups", r.groups},
            {"representatives", r.representatives},
            {"too_short_ids", r.too_short_ids},
            {"params", to_json(r.params)},
            {"counts",
             {{"input", r.kept_ids.size() + r.dropped_ids.size()},
              {"kept", r.kept_ids.size()},
              {"dropped", r.dropped_ids.size()},
              {"groups", r.groups.size()}}}};
}

DedupReport report_from_json(const json& j) {
    StrictObject obj(j, "dedup_report");
    DedupReport r;
    r.kept_ids = obj.get<std::vector<std::string>>("kept_ids");
    r.dropped_ids = obj.get<std::vector<std::string>>("dropped_ids");
    r.groups = obj.get<std::vector<std::vector<std::string>>>("groups");
    r.representatives = obj.get<std::vector<std::string>>("representatives");
    r.too_short_ids = obj.get<std::vector<std::string>>("too_short_ids");
    r.params = params_from_json(obj.at("params"));
    obj.at("counts");
    obj.finish();
    return r;
}

}  // namespace medcorpus::dedup
