#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "medcorpus/corpus.hpp"
#include "medcorpus/imaging.hpp"

namespace medcorpus::synth {

/// Full-scale task volumes and benchmark test-set sizes of the source dataset.
std::int64_t reference_volume(TaskKind task);
std::int64_t reference_test_size(TaskKind task);

struct GeneratorConfig {
    std::uint64_t seed = 20240101;
    /// Multiplier applied to reference volumes when `volumes` has no entry.
    double scale = 1.0 / 1000.0;
    std::map<TaskKind, std::int64_t> volumes;
    std::map<TaskKind, std::int64_t> test_sizes;
    int disease_vocab_size = 50;
    double zipf_exponent = 1.1;
    double duplicate_rate = 0.4;
    int duplicate_edit_ops = 3;
    double incomplete_rate = 0.02;
    /// Fraction of imaging patients with more than one study in a visit.
    double multi_study_rate = 0.2;
    double lateral_rate = 0.5;
    double contrast_rate = 0.5;
    /// Fraction of contrast-enhanced CT series reconstructed at 1.25 mm.
    double thin_slice_rate = 0.1;
    std::uint32_t xray_height = 144;
    std::uint32_t xray_width = 128;
    std::uint32_t ct_size = 64;
    std::uint32_t ct_min_slices = 20;
    std::uint32_t ct_max_slices = 32;
    bool write_images = true;

    /// Volume for a task: explicit entry, else max(1, round(reference * scale)).
    std::int64_t volume(TaskKind task) const;
    /// Test-set size: explicit entry, else max(1, round(reference * scale))
    /// capped at half the task volume.
    std::int64_t test_size(TaskKind task) const;

    void validate() const;
};

GeneratorConfig config_from_json(const json& j);
json to_json(const GeneratorConfig& config);

struct DuplicatePair {
    std::string original_record_id;
    std::string duplicate_record_id;
    double true_jaccard_5gram = 0.0;

    bool operator==(const DuplicatePair&) const = default;
};

using DuplicateManifest = std::vector<DuplicatePair>;

/// Held-out benchmark ids per task, excluded from every training stage.
using TestSplit = std::map<TaskKind, std::vector<std::string>>;

struct Cohort {
    Corpus corpus;
    DuplicateManifest manifest;
    TestSplit test_ids;
};

/// Deterministic for a given config. Duplicates copy earlier outpatient
/// records with `duplicate_edit_ops` random character edits.
Cohort generate_cohort(const GeneratorConfig& config);

/// |A n B| / |A u B| over the sets of contiguous n-scalar substrings.
/// Throws TooFewShingles when either text is shorter than n scalars.
double exact_jaccard(std::string_view text_a, std::string_view text_b, int n = 5);

/// Procedural pixel content for one series (HU for CT, raw intensity for X-ray).
imaging::Volume render_series(const GeneratorConfig& config, const RadiologyStudy& study,
                              const ImageSeries& series);

/// Writes the corpus, test_set.json, duplicate_manifest.jsonl,
/// generator_config.json and (if enabled) tensors/ under dir.
void write_cohort(const Cohort& cohort, const GeneratorConfig& config, const std::filesystem::path& dir);

TestSplit read_test_split(const std::filesystem::path& path);
json to_json(const TestSplit& split);
DuplicateManifest read_manifest(const std::filesystem::path& path);

}  // namespace medcorpus::synth
